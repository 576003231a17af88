"""Integer-only compute kernels.

All arithmetic here is on int64 numpy arrays; no kernel creates or consumes a
floating-point array. Scales enter as :class:`DyadicScale` and any integer
constant derived from a scale (``I_0 = round(1/S)``) is computed from its
integer mantissa and shift.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    CheckpointError,
    DimensionError,
    DivisionDomainError,
    InvalidInputError,
    OverflowRiskError,
)
from .qcore import (
    DEFAULT_PRECISION,
    DyadicScale,
    QuantizedTensor,
    dyadic_mul,
    dyadic_reciprocal_round,
    qmax,
    requantize,
    saturate,
)

INT32_MAX = (1 << 31) - 1


@dataclass(frozen=True)
class GeluConfig:
    lam: int = 6
    k_inter: int = 23
    k_out: int = 8

    def __post_init__(self):
        if self.lam < 1:
            raise InvalidInputError("lambda must be >= 1")
        if not 8 <= self.k_inter <= 30:
            raise InvalidInputError("k_inter must be in [8, 30]")
        if self.k_out not in (8, 16):
            raise InvalidInputError("GELU k_out must be 8 or 16")


@dataclass(frozen=True)
class ShiftmaxConfig:
    lam: int = 1
    k_inter: int = 23
    k_out: int = 16

    def __post_init__(self):
        if self.lam < 1 or not 8 <= self.k_inter <= 30 or not 2 <= self.k_out <= 16:
            raise InvalidInputError(f"invalid shiftmax config {self}")


@dataclass
class ExpResult:
    i_exp: np.ndarray
    s_exp: DyadicScale


@dataclass
class LayerNormParams:
    gamma: QuantizedTensor  # INT8, per feature
    beta: np.ndarray  # INT32 at scale gamma.scale * 2**-shift
    shift: int = 12

    def __post_init__(self):
        if self.gamma.data.ndim != 1 or np.shape(self.beta) != self.gamma.shape:
            raise DimensionError("gamma and beta must be 1-D of equal length")

    @property
    def beta_scale(self) -> DyadicScale:
        return self.gamma.scale.shifted(self.shift)


def _as_int64(x) -> np.ndarray:
    x = np.asarray(x)
    if x.dtype.kind not in "iu":
        raise InvalidInputError(f"integer kernel received dtype {x.dtype}")
    return x.astype(np.int64)


# --------------------------------------------------------------------- linear


def int_matmul(A, B, k_a: int = 8, k_b: int = 8) -> np.ndarray:
    """Exact integer product with an INT32 accumulator.

    ``k_a``/``k_b`` are the operand widths, used for the worst-case overflow
    check ``K * max|A| * max|B| < 2**31``.
    """
    A, B = _as_int64(A), _as_int64(B)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
        raise DimensionError(f"cannot multiply {A.shape} by {B.shape}")
    K = A.shape[1]
    if K * qmax(k_a) * qmax(k_b) > INT32_MAX:
        raise OverflowRiskError(f"inner dimension {K} may overflow INT32 for INT{k_a} x INT{k_b}")
    return A @ B


def linear(
    x: QuantizedTensor,
    W: QuantizedTensor,
    bias=None,
    bias_scale: DyadicScale | None = None,
    out_scale: DyadicScale | None = None,
    k_out: int = 8,
    p: int = DEFAULT_PRECISION,
) -> QuantizedTensor:
    """``requantize(x @ W + bias)``; ``W`` is stored ``[in, out]``.

    With ``out_scale=None`` the raw INT32 accumulator is returned at scale
    ``S_x * S_W``.
    """
    acc_scale = dyadic_mul(x.scale, W.scale, p)
    acc = int_matmul(x.data, W.data, x.k, W.k)
    if bias is not None:
        if bias_scale is None or bias_scale.b << acc_scale.c != acc_scale.b << bias_scale.c:
            raise CheckpointError(
                f"bias scale {bias_scale} does not match S_x*S_W = {acc_scale}"
            )
        acc = acc + _as_int64(bias)
    if out_scale is None:
        return QuantizedTensor(saturate(acc, 32), 32, acc_scale)
    return requantize(acc, acc_scale, out_scale, k_out, p)


def residual_add(
    a: QuantizedTensor,
    b: QuantizedTensor,
    out_scale: DyadicScale,
    k_out: int = 16,
    guard_bits: int = 8,
    p: int = DEFAULT_PRECISION,
) -> QuantizedTensor:
    """Add two tensors at a common INT32 scale ``S_out / 2**guard_bits``."""
    if a.shape != b.shape:
        raise DimensionError(f"residual shapes differ: {a.shape} vs {b.shape}")
    common = out_scale.shifted(guard_bits)
    a32 = requantize(a.data, a.scale, common, 32, p).data.astype(np.int64)
    b32 = requantize(b.data, b.scale, common, 32, p).data.astype(np.int64)
    acc = saturate(a32 + b32, 32) >> guard_bits
    return QuantizedTensor(saturate(acc, k_out), k_out, out_scale)


# --------------------------------------------------------------- exponentials


def _shift_exp_core(I: np.ndarray, I_0: int, k_inter: int, bound: int) -> np.ndarray:
    I_e = I + (I >> 1) - (I >> 4)
    I_e = np.maximum(I_e, bound)
    q = I_e // (-I_0)
    r = -(I_e - q * (-I_0))
    I_b = ((-r) >> 1) + I_0
    shift = k_inter - q
    # negative shift amounts continue 2**(k_inter - q) as a floor right shift
    left = np.clip(shift, 0, 62)
    right = np.clip(-shift, 0, 62)
    return np.where(shift >= 0, I_b << left, I_b >> right)


def shift_exp(I_delta, S: DyadicScale, k_inter: int = 23, lam: int = 6) -> ExpResult:
    """lambda-ShiftExp: ``S_exp * I_exp`` approximates ``exp(S * I_delta)``."""
    I = _as_int64(I_delta)
    if I.size and int(I.max()) > 0:
        raise InvalidInputError("shift_exp expects max-shifted (non-positive) input")
    I_0 = dyadic_reciprocal_round(S)
    if I_0 < 1:
        raise InvalidInputError(f"scale {S.value} too large for shift_exp (round(1/S) = 0)")
    i_exp = _shift_exp_core(I, I_0, k_inter, lam * k_inter * (-I_0))
    return ExpResult(i_exp, S.shifted(k_inter))


def int_div(I_num, I_den, k_out: int) -> tuple[np.ndarray, DyadicScale]:
    """``(floor(2**31 / den) * num) >> (31 - (k_out - 1))`` at scale ``2**-(k_out-1)``."""
    num, den = _as_int64(I_num), _as_int64(I_den)
    if den.size and (int(den.min()) <= 0 or int(den.max()) > INT32_MAX):
        raise DivisionDomainError("IntDiv denominator must lie in (0, 2**31)")
    if num.size and int(num.min()) < 0:
        raise DivisionDomainError("IntDiv numerator must be non-negative")
    factor = (1 << 31) // den
    out = (factor * num) >> (31 - (k_out - 1))
    return out, DyadicScale(1, k_out - 1)


def _bit_length(x: np.ndarray) -> np.ndarray:
    n = np.zeros_like(x)
    t = x.copy()
    while np.any(t > 0):
        n += t > 0
        t >>= 1
    return n


def _fit_denominator(num: np.ndarray, den: np.ndarray, limit_bits: int):
    """Right-shift ``num`` and ``den`` together until ``den < 2**limit_bits``."""
    excess = np.maximum(_bit_length(den) - limit_bits, 0)
    return num >> excess, den >> excess


def _sigmoid_ratio(i_exp: np.ndarray, i_exp_neg: np.ndarray, k_out: int) -> np.ndarray:
    den = i_exp + i_exp_neg
    num, den = _fit_denominator(i_exp, den, 31)
    # both terms can underflow to zero once lambda relaxes the clamp
    den = np.maximum(den, 1)
    out, _ = int_div(num, den, k_out)
    return np.minimum(out, qmax(k_out))


def _gelu_from_exp(x: np.ndarray, exp_fn, k_out: int) -> np.ndarray:
    I_p = x + (x >> 1) + (x >> 3) + (x >> 4)
    # sigmoid(z) = e^(z-M) / (e^(z-M) + e^-M) for any M; M >= 0 keeps both exponents <= 0
    I_max = np.maximum(I_p.max(axis=-1, keepdims=True), 0)
    e = exp_fn(I_p - I_max)
    e_neg = exp_fn(-I_max)
    return x * _sigmoid_ratio(e, np.broadcast_to(e_neg, e.shape), k_out)


def lambda_shift_gelu(
    I_x: QuantizedTensor,
    cfg: GeluConfig = GeluConfig(),
    out_scale: DyadicScale | None = None,
    k_out: int = 8,
    p: int = DEFAULT_PRECISION,
) -> QuantizedTensor:
    """Integer GELU ``x * sigmoid(1.702 x)``, max taken over the last axis.

    Without ``out_scale`` the product ``I_x * I_div`` is returned at scale
    ``S_x * 2**-(k_out-1)``; otherwise it is requantized to ``out_scale``.
    """
    x = _as_int64(I_x.data)
    I_0 = dyadic_reciprocal_round(I_x.scale)
    if I_0 < 1:
        raise InvalidInputError("input scale too large for shift_exp")
    bound = cfg.lam * cfg.k_inter * (-I_0)

    def exp_fn(I):
        return _shift_exp_core(I, I_0, cfg.k_inter, bound)

    out = _gelu_from_exp(x, exp_fn, cfg.k_out)
    scale = I_x.scale.shifted(cfg.k_out - 1)
    if out_scale is None:
        return QuantizedTensor(out, 32, scale)
    return requantize(out, scale, out_scale, k_out, p)


def shift_gelu_baseline(
    I_x: QuantizedTensor, k_inter: int = 23, k_out: int = 8
) -> QuantizedTensor:
    """I-ViT ShiftGELU with the original ``k_inter * (-I_0)`` clamp.

    Written independently of :func:`lambda_shift_gelu`: with the fixed clamp
    ``q <= k_inter`` always holds, so the exponent is a plain left shift.
    """
    x = _as_int64(I_x.data)
    I_0 = dyadic_reciprocal_round(I_x.scale)

    def exp_fn(I):
        I_e = I + (I >> 1) - (I >> 4)
        I_e = np.maximum(I_e, k_inter * (-I_0))
        q = I_e // (-I_0)
        r = -(I_e - q * (-I_0))
        I_b = ((-r) >> 1) + I_0
        return I_b << (k_inter - q)

    out = _gelu_from_exp(x, exp_fn, k_out)
    return QuantizedTensor(out, 32, I_x.scale.shifted(k_out - 1))


def shiftmax(I: QuantizedTensor, cfg: ShiftmaxConfig = ShiftmaxConfig()) -> QuantizedTensor:
    """Integer softmax over the last axis.

    Exponentials come from :func:`shift_exp`; each row is right-shifted so its
    sum stays below ``2**(32 - k_out)`` before :func:`int_div`, which bounds
    the floor loss of the row sum by ``n`` output LSBs.
    """
    x = _as_int64(I.data)
    if x.shape[-1] < 1:
        raise DimensionError("shiftmax needs rows of length >= 1")
    delta = x - x.max(axis=-1, keepdims=True)
    e = shift_exp(delta, I.scale, cfg.k_inter, cfg.lam).i_exp
    total = e.sum(axis=-1, keepdims=True)
    excess = np.maximum(_bit_length(total) - (32 - cfg.k_out), 0)
    e = e >> excess
    total = np.maximum(e.sum(axis=-1, keepdims=True), 1)
    out, s_div = int_div(e, np.broadcast_to(total, e.shape), cfg.k_out)
    out = np.minimum(out, qmax(cfg.k_out))
    return QuantizedTensor(out, 16, s_div)


# --------------------------------------------------------------- layernorm


def integer_isqrt(v):
    """``floor(sqrt(v))`` element-wise by integer Newton iteration."""
    v = _as_int64(v)
    if v.size and int(v.min()) < 0:
        raise InvalidInputError("isqrt of a negative value")
    scalar = v.ndim == 0
    v = np.atleast_1d(v)
    # initial guess 2**ceil(bits/2) >= sqrt(v)
    bits = _bit_length(v)
    x = np.where(v > 0, np.left_shift(1, (bits + 1) // 2), 0)
    while True:
        safe = np.maximum(x, 1)
        y = np.where(x > 0, (x + v // safe) >> 1, 0)
        done = y >= x
        if np.all(done):
            break
        x = np.where(done, x, y)
    return x[0] if scalar else x


def i_layernorm(
    I: QuantizedTensor,
    params: LayerNormParams,
    out_scale: DyadicScale | None = None,
    k_out: int = 8,
    p: int = DEFAULT_PRECISION,
) -> QuantizedTensor:
    """LayerNorm over the last axis with integer mean, variance and sqrt."""
    x = _as_int64(I.data)
    D = x.shape[-1]
    if D != params.gamma.shape[0]:
        raise DimensionError(f"feature dim {D} != layernorm dim {params.gamma.shape[0]}")
    mu = x.sum(axis=-1, keepdims=True) // D
    y = x - mu
    var = (y * y).sum(axis=-1, keepdims=True) // D
    sigma = np.maximum(integer_isqrt(var), 1)
    normed = (y << params.shift) // sigma
    acc = normed * params.gamma.data.astype(np.int64) + _as_int64(params.beta)
    acc_scale = params.beta_scale
    if out_scale is None:
        return QuantizedTensor(saturate(acc, 32), 32, acc_scale)
    return requantize(acc, acc_scale, out_scale, k_out, p)


# --------------------------------------------------------------- upsampling


def nearest_index(n_in: int, n_out: int) -> np.ndarray:
    """Source index ``floor(i * n_in / n_out)`` for each output position."""
    return (np.arange(n_out) * n_in) // n_out


def nearest_upsample(Q: QuantizedTensor, out_h: int, out_w: int) -> QuantizedTensor:
    """Nearest-neighbour resize of an ``[H, W, C]`` tensor by index rounding."""
    data = Q.data
    if data.ndim != 3 or 0 in data.shape:
        raise DimensionError(f"expected non-empty [H, W, C] tensor, got {data.shape}")
    H, W = data.shape[:2]
    if out_h < H or out_w < W:
        raise DimensionError("nearest_upsample only enlarges")
    return QuantizedTensor(data[nearest_index(H, out_h)][:, nearest_index(W, out_w)], Q.k, Q.scale)
