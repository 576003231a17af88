"""Measure kernel errors and the one-shot logit cosine before freezing tolerances.

Uses seeds disjoint from the test suite. Prints the values that
``isegmenter/tolerances.py`` is set from.
"""

import time

import numpy as np

from isegmenter import oracles
from isegmenter.calib import calibrate
from isegmenter.intkernels import shift_exp
from isegmenter.model import TOY_CONFIGS
from isegmenter.qcore import to_dyadic
from isegmenter.reports import run
from isegmenter.reference import Variant, fp32_forward, logit_similarity
from isegmenter.synth import structured_checkpoint, synth_dataset

N = 50_000
SEED = 9000


def shift_exp_grid(n_scales=4000):
    """Exhaustive over inputs on a dense log grid of scales; random draws miss the peak."""
    worst = 0.0
    for s in np.exp2(np.linspace(-12, -3, n_scales)):
        S = to_dyadic(float(s))
        I = -np.arange(0, int(10 / S.value) + 1)
        r = shift_exp(I, S)
        worst = max(worst, float(np.abs(r.i_exp * r.s_exp.value - np.exp(I * S.value)).max()))
    return worst


def kernels():
    print(f"shift_exp  grid max={shift_exp_grid():.6g}")
    for name, fn in [
        ("shift_exp", oracles.shift_exp_errors),
        ("gelu", oracles.gelu_errors),
        ("int_div", oracles.int_div_errors),
        ("shiftmax", oracles.shiftmax_errors),
        ("layernorm", oracles.layernorm_errors),
        ("linear", oracles.linear_errors),
    ]:
        t = time.perf_counter()
        e = fn(np.random.default_rng(SEED), N)
        print(f"{name:10s} max={e.max():.6g} p99={np.quantile(e, 0.99):.6g} mean={e.mean():.6g} ({time.perf_counter() - t:.1f}s)")
    rng = np.random.default_rng(SEED)
    print("nearest mismatches", oracles.nearest_mismatches(rng, 2000))
    print("isqrt mismatches", oracles.isqrt_mismatches(rng, N))


def one_shot_cosine(seeds=(101, 102, 103, 104, 105)):
    worst = {}
    for name, cfg in TOY_CONFIGS.items():
        vals = []
        for s in seeds:
            data = synth_dataset(12, cfg.K, cfg.image_h, seed=s)
            fp = structured_checkpoint(cfg, data[:8], seed=s)
            ic = calibrate(fp, [data[0][0]])
            cos = [logit_similarity(run(ic, img).logits, fp32_forward(img, fp, Variant()).logits) for img, _ in data[8:]]
            vals.append(min(cos))
        worst[name] = min(vals)
        print(f"{name}: per-seed min cosine {np.round(vals, 4).tolist()}")
    print("overall minimum", min(worst.values()))


if __name__ == "__main__":
    kernels()
    one_shot_cosine()
