"""Random-case error measurements of the integer kernels against references.

Each ``*_errors(rng, n)`` draws ``n`` random cases and returns one error value
per case, in the units its tolerance in :mod:`isegmenter.tolerances` uses.
"""

from __future__ import annotations

import math

import numpy as np

from .intkernels import (
    GeluConfig,
    LayerNormParams,
    ShiftmaxConfig,
    i_layernorm,
    int_div,
    integer_isqrt,
    lambda_shift_gelu,
    linear,
    nearest_upsample,
    shift_exp,
    shiftmax,
)
from .qcore import QuantizedTensor, dequantize, dyadic_mul, quantize, qmax, to_dyadic
from .reference import gelu_ref, layernorm_ref, nearest_upsample_ref, softmax_ref


def _log_uniform(rng, lo, hi, size=None):
    return np.exp2(rng.uniform(np.log2(lo), np.log2(hi), size))


def shift_exp_errors(rng, n: int) -> np.ndarray:
    """``|S_exp I_exp - exp(S I)|`` for non-positive inputs down to ``-10``."""
    out = np.empty(n)
    S = None
    for i in range(n):
        if i % 100 == 0:
            S = to_dyadic(float(_log_uniform(rng, 2.0**-12, 2.0**-3)))
        I = -int(rng.integers(0, int(10.0 / S.value) + 1))
        r = shift_exp(np.array([I]), S)
        out[i] = abs(float(r.i_exp[0]) * r.s_exp.value - np.exp(I * S.value))
    return out


def gelu_errors(rng, n: int, lam: int = 6, row: int = 32) -> np.ndarray:
    """Worst ``|out - x sigmoid(1.702 x)|`` per random INT8 row, over the input threshold.

    Input thresholds are drawn from ``[2, 9.5]``. Beyond about 9.5 the
    row-max shift pushes both exponentials below integer resolution, and
    below about 2 ``round(1/S)`` exceeds 64 and the division factor
    ``2**31 // den`` keeps fewer than two bits.
    """
    out = np.empty(n)
    cfg = GeluConfig(lam=lam)
    for i in range(n):
        S = to_dyadic(2 * float(rng.uniform(2.0, 9.5)) / 255)
        x = QuantizedTensor(rng.integers(-127, 128, size=row), 8, S)
        y = lambda_shift_gelu(x, cfg)
        ref = gelu_ref(dequantize(x), "sigmoid")
        out[i] = np.abs(dequantize(y) - ref).max() / (127 * S.value)
    return out


def int_div_errors(rng, n: int) -> np.ndarray:
    """Output-LSB error of IntDiv for ``num <= den < 2**(32 - k_out)``."""
    out = np.empty(n)
    for i in range(n):
        k = int(rng.choice([8, 16]))
        den = int(rng.integers(1, 1 << (32 - k)))
        num = int(rng.integers(0, den + 1))
        q, _ = int_div(np.array([num]), np.array([den]), k)
        out[i] = abs(int(q[0]) - num / den * (1 << (k - 1)))
    return out


def shiftmax_errors(rng, n: int, row_max: int = 64) -> np.ndarray:
    """Worst ``|p - softmax|`` per random INT16 row with logits spanning up to 16."""
    out = np.empty(n)
    cfg = ShiftmaxConfig()
    for i in range(n):
        m = float(rng.uniform(1.0, 16.0))
        S = to_dyadic(2 * m / 65535)
        L = int(rng.integers(1, row_max + 1))
        x = QuantizedTensor(rng.integers(-qmax(16), qmax(16) + 1, size=L), 16, S)
        p = dequantize(shiftmax(x, cfg))
        out[i] = np.abs(p - softmax_ref(dequantize(x))).max()
    return out


def layernorm_errors(rng, n: int) -> np.ndarray:
    """Worst output error per random INT16 row, over the output threshold."""
    out = np.empty(n)
    for i in range(n):
        D = int(rng.integers(8, 65))
        x = rng.normal(0.0, rng.uniform(0.2, 4.0), D) + rng.normal(0.0, 1.0)
        xq = quantize(x, float(np.abs(x).max()) * 1.05, 16)
        gamma = quantize(1.0 + 0.2 * rng.normal(size=D), 1.6, 8)
        beta_real = 0.1 * rng.normal(size=D)
        scale = gamma.scale.shifted(12)
        beta = np.round(beta_real / scale.value).astype(np.int64)
        ref = layernorm_ref(dequantize(xq), dequantize(gamma), beta * scale.value)
        m = float(np.abs(ref).max()) * 1.02
        s_out = to_dyadic(2 * m / 255)
        y = dequantize(i_layernorm(xq, LayerNormParams(gamma, beta, 12), s_out, 8))
        out[i] = np.abs(y - ref).max() / m
    return out


def linear_errors(rng, n: int) -> np.ndarray:
    """Output-LSB error of an INT8 linear against its dequantized real product."""
    out = np.empty(n)
    for i in range(n):
        K, M = int(rng.integers(1, 33)), int(rng.integers(1, 9))
        x = quantize(rng.normal(size=(2, K)), 3.0, 8)
        W = quantize(rng.normal(size=(K, M)) / np.sqrt(K), 3.0 / np.sqrt(K), 8)
        bs = dyadic_mul(x.scale, W.scale)
        bias = rng.integers(-1000, 1001, size=M)
        ref = dequantize(x) @ dequantize(W) + bias * bs.value
        m = float(np.abs(ref).max()) + 1e-3
        s_out = to_dyadic(2 * m / 255)
        y = linear(x, W, bias, bs, s_out, 8)
        out[i] = np.abs(y.data - ref / s_out.value).max()
    return out


def nearest_mismatches(rng, n: int) -> int:
    bad = 0
    for _ in range(n):
        H, W, C = (int(v) for v in rng.integers(1, 6, size=3))
        oh, ow = H * int(rng.integers(1, 5)) + int(rng.integers(0, 3)), W * int(rng.integers(1, 5))
        q = QuantizedTensor(rng.integers(-127, 128, size=(H, W, C)), 8, to_dyadic(0.1))
        got = nearest_upsample(q, oh, ow).data
        # brute force: source pixel whose footprint covers the output pixel's left/top edge
        ref = np.empty((oh, ow, C), dtype=np.int64)
        for r in range(oh):
            for c in range(ow):
                ref[r, c] = q.data[int(np.floor(r * H / oh)), int(np.floor(c * W / ow))]
        bad += int(not np.array_equal(got, ref))
        bad += int(not np.array_equal(got, nearest_upsample_ref(q.data, oh, ow)))
    return bad


def isqrt_mismatches(rng, n: int) -> int:
    v = rng.integers(0, 1 << 62, size=n, dtype=np.int64)
    v[: n // 4] = rng.integers(0, 1 << 16, size=n // 4)
    got = integer_isqrt(v)
    ref = np.array([math.isqrt(int(a)) for a in v])
    return int(np.count_nonzero(got != ref))
