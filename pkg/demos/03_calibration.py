"""One-shot post-training calibration of a small FP32 model."""

import time

import numpy as np

from isegmenter import TOY_CONFIGS, calibrate
from isegmenter.calib import CalibrationPlan
from isegmenter.container import checkpoint_bytes
from isegmenter.reference import Variant, fp32_forward, logit_similarity
from isegmenter.reports import run
from isegmenter.synth import structured_checkpoint, synth_dataset

cfg = TOY_CONFIGS["d32-l2-k2"]
data = synth_dataset(10, cfg.K, cfg.image_h, seed=11)
fp = structured_checkpoint(cfg, data[:6], seed=11)
held = data[6:]

# a single image is enough to fix every activation range
t0 = time.perf_counter()
ic = calibrate(fp, [data[0][0]])
print("calibrated in %.3f s" % (time.perf_counter() - t0))

for name in ("patch", "enc.0.attn_logits", "enc.1.gelu", "logits"):
    s = ic.site(name)
    print(f"{name:20s} scale {s.value:.3e}  ({s})")

size_fp, size_int = len(checkpoint_bytes(fp)), len(checkpoint_bytes(ic))
print(f"checkpoint {size_fp} -> {size_int} bytes ({size_fp / size_int:.2f}x)")


def worst_cosine(ck):
    return min(logit_similarity(run(ck, img).logits, fp32_forward(img, fp, Variant()).logits) for img, _ in held)


print("one-shot worst held-out logit cosine %.4f" % worst_cosine(ic))

# more samples blend ranges with an EMA (no gain on this toy model)
plan = CalibrationPlan.for_config(cfg, samples=4, alpha=0.05)
ic4 = calibrate(fp, [img for img, _ in data[:4]], plan)
print("four-sample worst held-out logit cosine %.4f" % worst_cosine(ic4))
