"""Post-training calibration and weight conversion."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import CheckpointError, InvalidInputError, NotCalibratedError
from .intkernels import GeluConfig
from .model import (
    BLOCK_LINEARS,
    FP32,
    INPUT_SCALE,
    INT,
    Checkpoint,
    TensorEntry,
    activation_sites,
    validate_checkpoint,
)
from .qcore import (
    DEFAULT_PRECISION,
    DyadicScale,
    RangeObserver,
    dyadic_mul,
    observe,
    quantize,
    round_half_away,
    saturate,
    tensor_threshold,
    threshold,
    threshold_scale,
)
from .reference import Variant, fp32_forward

_STORAGE = {8: np.int8, 16: np.int16, 32: np.int32}


@dataclass
class CalibrationPlan:
    alpha: float = 0.05
    samples: int = 1
    sites: dict = field(default_factory=dict)  # site name -> bit-width
    gelu: GeluConfig = GeluConfig()

    def __post_init__(self):
        if self.samples < 1:
            raise InvalidInputError("calibration needs at least one sample")
        if not 0.0 < self.alpha <= 1.0:
            raise InvalidInputError(f"EMA momentum must be in (0, 1], got {self.alpha}")

    @classmethod
    def for_config(cls, config, **kw) -> "CalibrationPlan":
        return cls(sites=activation_sites(config), **kw)


def freeze(observers: dict) -> dict:
    """Freeze every observer; all must have seen data."""
    missing = [name for name, o in observers.items() if not o.initialized]
    if missing:
        raise NotCalibratedError(f"activation sites never exercised: {', '.join(missing)}")
    for o in observers.values():
        o.frozen = True
    return observers


def _linear_inputs(config) -> dict[str, str]:
    """Which activation site feeds each linear layer."""
    inputs = {"patch_embed": "input", "proj_patch": "dec_norm", "proj_cls": "dec_norm"}
    for prefix in config.block_prefixes():
        for name, (src, _) in BLOCK_LINEARS.items():
            inputs[prefix + name] = prefix + src
    return inputs


def _quantize_weight(W: np.ndarray, p: int) -> TensorEntry:
    if not np.all(np.isfinite(W)):
        raise InvalidInputError("weight tensor contains non-finite values")
    q = quantize(W, tensor_threshold(W), 8, p)
    return TensorEntry(q.data, q.scale)


def _bind_int32(values: np.ndarray, scale: DyadicScale) -> TensorEntry:
    """Real values as INT32 at exactly ``scale``."""
    if not np.all(np.isfinite(values)):
        raise InvalidInputError("bias tensor contains non-finite values")
    # b / 2**c as an exact power-of-two division keeps this reproducible
    I = round_half_away(np.ldexp(values.astype(np.float64), scale.c) / scale.b)
    return TensorEntry(saturate(I, 32).astype(np.int32), scale)


def convert_weights(fp32_ckpt: Checkpoint, site_scales: dict | None = None) -> dict[str, TensorEntry]:
    """Integer tensor table for the parameters of ``fp32_ckpt``.

    Weights and embeddings become INT8 with a per-tensor ``max|W|`` threshold.
    Biases become INT32 at the product of the input activation scale and the
    weight scale, so ``site_scales`` must cover every linear input site;
    without it only weights, norms and embeddings are converted.
    """
    if fp32_ckpt.mode != FP32:
        raise CheckpointError("convert_weights expects an FP32 checkpoint")
    cfg = fp32_ckpt.config
    p = cfg.p
    src = {k: e.data for k, e in fp32_ckpt.tensors.items() if not k.startswith("site:")}
    scales = dict(site_scales or {})
    scales.setdefault("input", INPUT_SCALE)
    out: dict[str, TensorEntry] = {}
    inv_sqrt_dh = 1.0 / math.sqrt(cfg.head_dim)

    for name, x_site in _linear_inputs(cfg).items():
        wname = name + ".weight" if name + ".weight" in src else name
        W = src[wname].astype(np.float64)
        b = src.get(name + ".bias")
        b = None if b is None else b.astype(np.float64)
        if name.endswith("attn.q"):
            # fold the attention temperature into the query projection
            W = W * inv_sqrt_dh
            b = b * inv_sqrt_dh
        wq = _quantize_weight(W, p)
        out[wname] = wq
        if b is not None and x_site in scales:
            out[name + ".bias"] = _bind_int32(b, dyadic_mul(scales[x_site], wq.scale, p))

    norms = ["dec_norm"] + [prefix + ln for prefix in cfg.block_prefixes() for ln in ("ln1", "ln2")]
    for name in norms:
        g = _quantize_weight(src[name + ".weight"].astype(np.float64), p)
        out[name + ".weight"] = g
        out[name + ".bias"] = _bind_int32(src[name + ".bias"], g.scale.shifted(cfg.ln_shift))

    for name in ("pos_embed", "cls_embed"):
        out[name] = _quantize_weight(src[name].astype(np.float64), p)
    return out


def site_scale(obs: RangeObserver, k: int, p: int = DEFAULT_PRECISION) -> DyadicScale:
    return threshold_scale(threshold(obs), k, p)


def collect_observers(fp32_ckpt: Checkpoint, samples, plan: CalibrationPlan) -> tuple[dict, int]:
    """Stream up to ``plan.samples`` images through the float graph."""
    observers = {name: RangeObserver(plan.alpha, name=name) for name in plan.sites}

    def hook(name, x):
        obs = observers.get(name)
        if obs is not None:
            observe(obs, x)

    seen = 0
    for image in samples:
        if seen >= plan.samples:
            break
        fp32_forward(image, fp32_ckpt, Variant(), hook=hook)
        seen += 1
    if seen == 0:
        raise InvalidInputError("calibration stream is empty")
    return observers, seen


def calibrate(fp32_ckpt: Checkpoint, samples, plan: CalibrationPlan | None = None) -> Checkpoint:
    """One pass of EMA range calibration followed by integer conversion."""
    cfg = fp32_ckpt.config
    plan = plan or CalibrationPlan.for_config(cfg)
    expected = activation_sites(cfg)
    if set(plan.sites) != set(expected):
        missing = sorted(set(expected) - set(plan.sites))
        raise NotCalibratedError(f"calibration plan does not cover sites: {', '.join(missing) or '(extra sites)'}")
    observers, seen = collect_observers(fp32_ckpt, samples, plan)
    freeze(observers)
    p = cfg.p
    scales = {name: site_scale(observers[name], k, p) for name, k in expected.items()}
    tensors = convert_weights(fp32_ckpt, scales)
    for name, k in expected.items():
        tensors["site:" + name] = TensorEntry(np.zeros((), dtype=_STORAGE[k]), scales[name])
    config = replace(cfg, gelu=plan.gelu)
    meta = {"calib.samples": str(seen), "calib.alpha": repr(plan.alpha)}
    ckpt = Checkpoint(config, tensors, INT, meta)
    validate_checkpoint(ckpt)
    return ckpt
