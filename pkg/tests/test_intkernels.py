import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from isegmenter import tolerances as tol
from isegmenter.errors import DimensionError, DivisionDomainError, InvalidInputError, OverflowRiskError
from isegmenter.intkernels import (
    GeluConfig,
    LayerNormParams,
    ShiftmaxConfig,
    i_layernorm,
    int_div,
    int_matmul,
    integer_isqrt,
    lambda_shift_gelu,
    linear,
    nearest_upsample,
    residual_add,
    shift_exp,
    shift_gelu_baseline,
    shiftmax,
)
from isegmenter.qcore import DyadicScale, QuantizedTensor, dequantize, dyadic_reciprocal_round, quantize, to_dyadic
from isegmenter.reference import gelu_ref, layernorm_ref, nearest_upsample_ref, softmax_ref

ONE = DyadicScale(1, 0)


def qt(values, k=8, scale=ONE):
    return QuantizedTensor(np.asarray(values, dtype=np.int64), k, scale)


# ------------------------------------------------------------ linear


def test_int_matmul_examples():
    assert int_matmul([[1, 2]], [[3], [4]]).tolist() == [[11]]
    B = np.arange(-6, 6).reshape(3, 4)
    assert np.array_equal(int_matmul(np.eye(3, dtype=np.int64), B), B)
    with pytest.raises(DimensionError):
        int_matmul([[1, 2]], [[1, 2]])
    with pytest.raises(OverflowRiskError):
        int_matmul(np.zeros((1, 1 << 20), np.int64), np.zeros((1 << 20, 1), np.int64), 16, 16)


def test_linear_identity():
    x = qt([[5, -7, 100]])
    W = qt(np.eye(3))
    out = linear(x, W, np.zeros(3, np.int64), ONE, ONE, 8)
    assert out.data.tolist() == [[5, -7, 100]]
    half = DyadicScale(1, 1)
    out = linear(qt([[5, -7, 100]], scale=half), qt(np.eye(3), scale=half), out_scale=DyadicScale(1, 2))
    assert out.data.tolist() == [[5, -7, 100]]


def test_residual_add_examples():
    s = to_dyadic(0.01)
    a = qt([[300, -2000, 7]], 16, s)
    z = qt([[0, 0, 0]], 16, to_dyadic(0.3))
    assert np.array_equal(residual_add(a, z, s).data, a.data)
    assert not residual_add(a, qt(-a.data, 16, s), s).data.any()
    with pytest.raises(DimensionError):
        residual_add(a, qt([[1]], 16, s), s)


# ------------------------------------------------------------ exp and div


def test_shift_exp_examples():
    S = to_dyadic(2.0**-6)
    I_0 = dyadic_reciprocal_round(S)
    r = shift_exp(np.array([0, -I_0]), S)
    assert r.i_exp[0] == I_0 << 23
    value = r.i_exp * r.s_exp.value
    assert value[0] == pytest.approx(1.0)
    assert value[1] == pytest.approx(0.39, abs=0.005)
    with pytest.raises(InvalidInputError):
        shift_exp(np.array([1]), S)


def test_shift_exp_clamp():
    S = to_dyadic(0.1)
    I_0 = dyadic_reciprocal_round(S)
    deep = np.array([-10_000])
    # lambda 1: I_e clamps to k_inter * -I_0, so q = k_inter, r = 0 and I_exp = I_0
    assert shift_exp(deep, S, lam=1).i_exp.tolist() == [I_0]
    # lambda 6 lets the exponent run past k_inter and the value underflows
    assert shift_exp(deep, S, lam=6).i_exp.tolist() == [0]


def test_int_div_examples():
    assert int_div(np.array([0]), np.array([5]), 8)[0].tolist() == [0]
    assert int_div(np.array([1000]), np.array([2000]), 8)[0].tolist() == [63]
    q, s = int_div(np.array([1000]), np.array([1000]), 8)
    assert q.tolist() == [127] and s == DyadicScale(1, 7)
    with pytest.raises(DivisionDomainError):
        int_div(np.array([1]), np.array([0]), 8)
    with pytest.raises(DivisionDomainError):
        int_div(np.array([-1]), np.array([3]), 8)


# ------------------------------------------------------------ GELU


def test_gelu_examples():
    cfg = GeluConfig()
    z = lambda_shift_gelu(qt(np.zeros((2, 8))), cfg)
    assert not z.data.any()
    S = to_dyadic(1 / 16)
    x = qt([[64, 0, -20, 10]], scale=S)
    y = dequantize(lambda_shift_gelu(x, cfg))
    m = 127 * S.value
    assert abs(y[0, 0] - 4 * (1 / (1 + math.exp(-6.8)))) <= tol.GELU_TOL * m
    assert np.abs(y - gelu_ref(dequantize(x), "sigmoid")).max() <= tol.GELU_TOL * m


def test_gelu_requantized_output():
    S = to_dyadic(0.05)
    x = qt(np.arange(-127, 128).reshape(5, 51), scale=S)
    out = lambda_shift_gelu(x, GeluConfig(), to_dyadic(7.0 / 127), 8)
    assert out.k == 8 and out.data.dtype == np.int8
    assert np.abs(dequantize(out) - gelu_ref(dequantize(x), "sigmoid")).max() <= tol.GELU_TOL * 127 * S.value


@settings(max_examples=300, deadline=None)
@given(
    arrays(np.int64, st.tuples(st.integers(1, 4), st.integers(1, 40)), elements=st.integers(-127, 127)),
    st.floats(2.0**-10, 1.0),
)
def test_lambda_one_matches_baseline(x, s):
    q = qt(x, scale=to_dyadic(s))
    a = lambda_shift_gelu(q, GeluConfig(lam=1))
    b = shift_gelu_baseline(q)
    assert np.array_equal(a.data, b.data) and a.scale == b.scale


@settings(max_examples=200, deadline=None)
@given(
    arrays(np.int64, st.integers(1, 64), elements=st.integers(-(2**14), 0)),
    st.floats(2.0**-12, 2.0**-2),
    st.integers(2, 8),
)
def test_shift_exp_clamp_locality(I, s, lam):
    S = to_dyadic(s)
    I_0 = dyadic_reciprocal_round(S)
    I_e = I + (I >> 1) - (I >> 4)
    diff = shift_exp(I, S, lam=lam).i_exp != shift_exp(I, S, lam=1).i_exp
    assert not np.any(diff & (I_e >= 23 * -I_0))


@settings(max_examples=200, deadline=None)
@given(arrays(np.int64, st.integers(1, 64), elements=st.integers(-(2**15), 0)), st.floats(2.0**-12, 1.0))
def test_shift_exp_positive_and_peaks_at_zero(I, s):
    S = to_dyadic(s)
    I = np.append(I, 0)
    e = shift_exp(I, S).i_exp
    assert np.all(e >= 0)
    assert e[-1] == e.max()
    order = np.argsort(I, kind="stable")
    assert np.all(np.diff(e[order]) >= 0)


# ------------------------------------------------------------ shiftmax


def test_shiftmax_examples():
    S = to_dyadic(8.0 / 32767)
    p = dequantize(shiftmax(qt(np.full((1, 10), 1234), 16, S)))
    assert np.all(p == p[0, 0])
    assert p[0, 0] == pytest.approx(0.1, abs=0.01)

    row = np.array([[0, 0, 0, 0, 0]])
    row[0, 2] = 4096  # S * gap = 8 at S = 1/512
    p = dequantize(shiftmax(qt(row, 16, DyadicScale(1, 9))))
    assert p[0, 2] >= 0.96
    assert np.all(np.delete(p[0], 2) <= 0.01)


@settings(max_examples=300, deadline=None)
@given(
    arrays(np.int64, st.tuples(st.integers(1, 3), st.integers(1, 64)), elements=st.integers(-32767, 32767)),
    st.floats(1.0, 16.0),
)
def test_shiftmax_normalization(x, m):
    k_out = 15
    S = to_dyadic(2 * m / 65535)
    out = shiftmax(qt(x, 16, S), ShiftmaxConfig(k_out=k_out))
    n = x.shape[1]
    assert out.data.min() >= 0 and out.data.max() <= 2 ** (k_out - 1) - 1
    total = out.data.astype(np.int64).sum(axis=1) * out.scale.value
    assert np.all(total <= 1.0)
    assert np.all(total >= 1.0 - n * 2.0 ** -(k_out - 1))
    rows = np.arange(x.shape[0])
    assert np.all(out.data[rows, x.argmax(axis=1)] == out.data.max(axis=1))


def test_shiftmax_close_to_softmax():
    rng = np.random.default_rng(11)
    for _ in range(50):
        S = to_dyadic(2 * rng.uniform(1, 16) / 65535)
        x = qt(rng.integers(-32767, 32768, size=(1, int(rng.integers(1, 65)))), 16, S)
        diff = np.abs(dequantize(shiftmax(x)) - softmax_ref(dequantize(x)))
        assert diff.max() <= tol.SHIFTMAX_TOL


# ------------------------------------------------------------ layernorm


def _ln_params(gamma_real, beta_real, shift=12):
    g = quantize(gamma_real, float(np.abs(gamma_real).max()), 8)
    s = g.scale.shifted(shift)
    return LayerNormParams(g, np.round(np.asarray(beta_real) / s.value).astype(np.int64), shift)


def test_layernorm_constant_row_returns_beta():
    params = _ln_params(np.ones(6), np.linspace(-0.5, 0.5, 6))
    out = i_layernorm(qt(np.full((2, 6), 37), 16, to_dyadic(0.01)), params)
    assert out.k == 32
    assert np.array_equal(out.data, np.broadcast_to(params.beta, (2, 6)))


def test_layernorm_two_point_row():
    params = _ln_params(np.ones(2), np.zeros(2))
    out = i_layernorm(qt([[-900, 900]], 16, to_dyadic(0.003)), params, to_dyadic(2 * 1.2 / 255), 8)
    # floor shifts cost up to one output step on each side
    assert dequantize(out)[0] == pytest.approx([-1.0, 1.0], abs=2 * out.scale.value)
    with pytest.raises(DimensionError):
        i_layernorm(qt([[1, 2, 3]], 16), params)


def test_layernorm_close_to_reference():
    rng = np.random.default_rng(5)
    for _ in range(30):
        D = int(rng.integers(8, 65))
        x = rng.normal(0, 2, D) + 1.0
        xq = quantize(x, float(np.abs(x).max()) * 1.05, 16)
        params = _ln_params(1.0 + 0.2 * rng.normal(size=D), 0.1 * rng.normal(size=D))
        ref = layernorm_ref(dequantize(xq), dequantize(params.gamma), params.beta * params.beta_scale.value)
        m = float(np.abs(ref).max()) * 1.02
        y = dequantize(i_layernorm(xq, params, to_dyadic(2 * m / 255), 8))
        assert np.abs(y - ref).max() / m <= tol.LAYERNORM_TOL


# ------------------------------------------------------------ isqrt and upsampling


def test_isqrt_examples_and_exhaustive():
    assert integer_isqrt(0) == 0
    assert integer_isqrt(16) == 4
    assert integer_isqrt(17) == 4
    v = np.arange(1 << 20, dtype=np.int64)
    r = integer_isqrt(v)
    assert np.all(r * r <= v) and np.all((r + 1) * (r + 1) > v)
    with pytest.raises(InvalidInputError):
        integer_isqrt(np.array([-1]))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, (1 << 62) - 1))
def test_isqrt_matches_math(v):
    assert int(integer_isqrt(np.array([v]))[0]) == math.isqrt(v)


def test_nearest_examples():
    one = qt([[[42, -1]]])
    assert np.all(nearest_upsample(one, 5, 5).data == np.array([42, -1]))
    two = qt(np.arange(4).reshape(2, 2, 1))
    up = nearest_upsample(two, 4, 4).data[..., 0]
    assert np.array_equal(up, np.kron(np.arange(4).reshape(2, 2), np.ones((2, 2), np.int64)))
    three = qt(np.arange(9).reshape(3, 3, 1))
    got = nearest_upsample(three, 5, 5).data[..., 0]
    brute = np.array([[3 * (r * 3 // 5) + c * 3 // 5 for c in range(5)] for r in range(5)])
    assert np.array_equal(got, brute)
    with pytest.raises(DimensionError):
        nearest_upsample(three, 2, 5)


@settings(max_examples=150, deadline=None)
@given(
    arrays(np.int64, st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 3)), elements=st.integers(-127, 127)),
    st.integers(0, 7),
    st.integers(0, 7),
)
def test_nearest_value_preserving(x, dh, dw):
    q = qt(x)
    H, W = x.shape[:2]
    out = nearest_upsample(q, H + dh, W + dw).data
    assert np.array_equal(out, nearest_upsample_ref(x, H + dh, W + dw))
    assert set(out.ravel().tolist()) <= set(x.ravel().tolist())
