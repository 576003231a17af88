"""The integer kernels next to their float counterparts."""

import numpy as np

from isegmenter.intkernels import (
    GeluConfig, LayerNormParams, i_layernorm, lambda_shift_gelu, shift_exp, shift_gelu_baseline, shiftmax,
)
from isegmenter.qcore import QuantizedTensor, dequantize, quantize, to_dyadic
from isegmenter.reference import gelu_ref, layernorm_ref, softmax_ref

# exp on non-positive inputs
S = to_dyadic(1 / 16)
I = np.arange(-64, 1, 8)
e = shift_exp(I, S)
print("x      ", I * S.value)
print("exp    ", np.round(np.exp(I * S.value), 4))
print("int exp", np.round(e.i_exp * e.s_exp.value, 4))

# GELU: the wider clamp (lambda=6) fixes the saturated tail of the baseline
x = QuantizedTensor(np.arange(-127, 128, 1)[None, :], 8, to_dyadic(8 / 127))
real = x.data * x.scale.value
base = dequantize(shift_gelu_baseline(x))
lam6 = dequantize(lambda_shift_gelu(x, GeluConfig(lam=6)))
ref = real * (1 / (1 + np.exp(-1.702 * real)))
tail = real < -2
print("GELU tail abs err: baseline %.4f, lambda=6 %.4f" % (np.abs(base - ref)[tail].max(), np.abs(lam6 - ref)[tail].max()))
# the truncated reciprocal in the division costs most near the top of the range
err = np.abs(lam6 - gelu_ref(real))
print("GELU vs erf form, lambda=6: max err %.4f at x=%.2f (range %.1f)" % (err.max(), real[0, err.argmax()], 8.0))

# softmax rows
rng = np.random.default_rng(1)
logits = rng.normal(0, 2, (3, 8))
q = quantize(logits, 8.0, 16)
p = shiftmax(q)
print("shiftmax row sums", p.data.sum(axis=1) * p.scale.value)
print("max |p - softmax| %.4f" % np.abs(dequantize(p) - softmax_ref(dequantize(q))).max())

# layernorm with unit gain and zero shift
h = rng.normal(0.5, 1.5, (4, 32))
qh = quantize(h, 6.0, 16)
params = LayerNormParams(quantize(np.ones(32), 1.0, 8), np.zeros(32, np.int64))
out = i_layernorm(qh, params, out_scale=to_dyadic(4 / 127))
print("layernorm max err %.4f" % np.abs(dequantize(out) - layernorm_ref(dequantize(qh))).max())
