"""Integer-only inference on a synthetic scene, with its memory traffic."""

import numpy as np

from isegmenter import TOY_CONFIGS, TraceMeters, calibrate, forward, quantize_image, traffic_report
from isegmenter.reference import Variant, fp32_forward, miou
from isegmenter.synth import structured_checkpoint, synth_dataset

cfg = TOY_CONFIGS["d64-l2-k4"]
data = synth_dataset(10, cfg.K, cfg.image_h, seed=21)
fp = structured_checkpoint(cfg, data[:8], seed=21)
ic = calibrate(fp, [data[0][0]])

image, label = data[9]
x = quantize_image(image)
print("input", x.data.dtype, x.data.shape, "scale", x.scale.value)

meters = TraceMeters()
cmap, logits, meters = forward(x, ic, meters)
print("logits", logits.data.dtype, logits.data.shape, "fp ops", meters.fp_ops)

ref = fp32_forward(image, fp, Variant()).class_map
print("agreement with FP32 map %.4f" % np.mean(cmap == ref))
print("mIoU INT %.3f  FP32 %.3f" % (miou(cmap, label, cfg.K)[1], miou(ref, label, cfg.K)[1]))

# a coarse picture of the class map
for row in cmap[::8]:
    print("".join(".#+o"[c] for c in row[::2]))

t = traffic_report(meters, ic)
print("traffic %.2f Mbit, 32-bit equivalent %.2f Mbit, ratio %.2f" % (t["total"] / 1e6, t["fp32_total"] / 1e6, t["ratio"]))
for kind, bits in sorted(t["per_kind"].items(), key=lambda kv: -kv[1]):
    print(f"  {kind:12s} {bits / 1e3:9.1f} kbit")
