"""Symmetric quantization and dyadic scales, step by step."""

import numpy as np

from isegmenter.qcore import dequantize, quantize, scale_from_threshold, threshold_scale, to_dyadic

# a real scale becomes b / 2**c with a 15-bit mantissa
S = 2.54 / 255
d = to_dyadic(S)
print("S =", S, "->", d, "value", d.value, "rel err", abs(d.value - S) / S)

# quantize some values on [-1.27, 1.27] to INT8
x = np.array([-1.27, -0.5, 0.0, 0.004, 0.3, 1.27, 2.0])
q = quantize(x, 1.27, 8)
print("codes   ", q.data)
print("back    ", np.round(dequantize(q), 4))  # 2.0 saturates to the threshold

# the stored scale rounds up, so the threshold itself maps inside the code range
print("threshold scale", threshold_scale(1.27, 8).value, ">=", scale_from_threshold(1.27, 8))

# round trip error stays within half a step
rng = np.random.default_rng(0)
y = rng.uniform(-3, 3, 10000)
err = np.abs(dequantize(quantize(y, 3.0, 8)) - y)
print("max round trip error %.5f vs S/2 = %.5f" % (err.max(), scale_from_threshold(3.0, 8) / 2))

# INT16 is much finer
err16 = np.abs(dequantize(quantize(y, 3.0, 16)) - y).max()
print("INT16 max error %.2e" % err16)
