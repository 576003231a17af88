"""Floating-point oracle path and evaluation metrics.

Everything here runs in float64 so that it serves as a reference for the
integer kernels rather than as a second approximation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import DimensionError, InvalidInputError, ModeError
from .intkernels import nearest_index
from .model import FP32, Checkpoint, ModelConfig, TraceMeters, _check_pad, _patches, argmax_classes

SQRT_HALF = 1.0 / math.sqrt(2.0)
GELU_KINDS = ("exact", "sigmoid", "shift", "lambda")


def gelu_ref(x, kind: str = "exact") -> np.ndarray:
    """``x * Phi(x)`` (exact) or ``x * sigmoid(1.702 x)`` (sigmoid)."""
    x = np.asarray(x, dtype=np.float64)
    if kind == "exact":
        return 0.5 * x * (1.0 + erf(x * SQRT_HALF))
    if kind == "sigmoid":
        return x * sigmoid(1.702 * x)
    raise InvalidInputError(f"unknown GELU reference {kind!r}")


def sigmoid(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def shift_gelu_real(x, lam: int = 1, k_inter: int = 23) -> np.ndarray:
    """Real-arithmetic model of the shift-add GELU.

    Same structure as the integer kernel (shift-add constants, clamped base-2
    exponential with a linear mantissa) but without integer rounding.
    """
    x = np.asarray(x, dtype=np.float64)
    a = x * 1.6875
    top = np.maximum(a.max(axis=-1, keepdims=True), 0.0)

    def exp2_lin(t):
        u = np.maximum(t * 1.4375, -float(lam * k_inter))
        q = np.floor(-u)
        f = -u - q
        return (1.0 - f / 2.0) * np.exp2(-q)

    num = exp2_lin(a - top)
    den = num + exp2_lin(-top)
    return x * num / den


def softmax_ref(x, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def layernorm_ref(x, gamma=None, beta=None, eps: float = 1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    y = x - x.mean(axis=-1, keepdims=True)
    y = y / np.sqrt((y * y).mean(axis=-1, keepdims=True) + eps)
    if gamma is not None:
        y = y * gamma
    if beta is not None:
        y = y + beta
    return y


def _bilinear_axis(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def bilinear_upsample_ref(x, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize of an ``[H, W, ...]`` array."""
    x = np.asarray(x, dtype=np.float64)
    H, W = x.shape[:2]
    r0, r1, fr = _bilinear_axis(H, out_h)
    c0, c1, fc = _bilinear_axis(W, out_w)
    extra = (1,) * (x.ndim - 2)
    fr = fr.reshape((-1, 1) + extra)
    fc = fc.reshape((1, -1) + extra)
    top = x[r0][:, c0] * (1 - fc) + x[r0][:, c1] * fc
    bot = x[r1][:, c0] * (1 - fc) + x[r1][:, c1] * fc
    return top * (1 - fr) + bot * fr


def nearest_upsample_ref(x, out_h: int, out_w: int) -> np.ndarray:
    x = np.asarray(x)
    return x[nearest_index(x.shape[0], out_h)][:, nearest_index(x.shape[1], out_w)]


def l2_normalize_ref(x, axis: int = -1) -> np.ndarray:
    """Unit-norm rows; all-zero rows come back unchanged."""
    x = np.asarray(x, dtype=np.float64)
    n = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    return np.where(n > 0, x / np.where(n > 0, n, 1.0), x)


# ------------------------------------------------------------------ forward


@dataclass(frozen=True)
class Variant:
    """Switches for the floating-point graph."""

    l2_norm: bool = False
    interp: str = "nearest"
    gelu: str = "exact"
    lam: int = 6
    k_inter: int = 23

    def __post_init__(self):
        if self.interp not in ("nearest", "bilinear"):
            raise InvalidInputError(f"interp must be nearest or bilinear, got {self.interp!r}")
        if self.gelu not in GELU_KINDS:
            raise InvalidInputError(f"gelu must be one of {GELU_KINDS}, got {self.gelu!r}")


INT_MATCHED = Variant(l2_norm=False, interp="nearest", gelu="lambda")
FULL_BASELINE = Variant(l2_norm=True, interp="bilinear", gelu="exact")


@dataclass
class FP32Result:
    class_map: np.ndarray
    logits: np.ndarray
    activations: list  # (block prefix, post-GELU array) per block
    meters: TraceMeters


class _Graph:
    def __init__(self, ckpt: Checkpoint, variant: Variant, hook, meters: TraceMeters):
        self.w = {k: e.data.astype(np.float64) for k, e in ckpt.tensors.items() if not k.startswith("site:")}
        self.cfg = ckpt.config
        self.variant = variant
        self.hook = hook
        self.meters = meters
        self.acts = []

    def site(self, name, x):
        if self.hook is not None:
            self.hook(name, x)
        self.meters.count_fp(x.size)
        return x

    def linear(self, x, name, kind="Linear"):
        W = self.w[name + ".weight"] if name + ".weight" in self.w else self.w[name]
        y = x @ W
        reads = [(x.size, 32), (W.size, 32)]
        b = self.w.get(name + ".bias")
        if b is not None:
            y = y + b
            reads.append((b.size, 32))
        self.meters.traffic(kind, reads, [(y.size, 32), (y.size, 32)])
        self.meters.count_fp(2 * x.shape[0] * W.size)
        return y

    def matmul(self, a, b):
        y = a @ b
        self.meters.traffic("MatMul", [(a.size, 32), (b.size, 32)], [(y.size, 32), (y.size, 32)])
        self.meters.count_fp(2 * a.shape[0] * b.size)
        return y

    def gelu(self, x):
        v = self.variant
        if v.gelu == "exact":
            return gelu_ref(x, "exact")
        if v.gelu == "sigmoid":
            return gelu_ref(x, "sigmoid")
        lam = 1 if v.gelu == "shift" else v.lam
        return shift_gelu_real(x, lam, v.k_inter)

    def norm(self, x, name):
        return layernorm_ref(x, self.w[name + ".weight"], self.w[name + ".bias"])

    def attention(self, h, prefix):
        cfg = self.cfg
        dh = cfg.head_dim
        q = self.site(prefix + "q", self.linear(h, prefix + "attn.q") / math.sqrt(dh))
        k = self.site(prefix + "k", self.linear(h, prefix + "attn.k"))
        v = self.site(prefix + "v", self.linear(h, prefix + "attn.v"))
        logits, outs = [], []
        for j in range(cfg.heads):
            cols = slice(j * dh, (j + 1) * dh)
            s = self.matmul(q[:, cols], k[:, cols].T)
            logits.append(s)
            outs.append(self.matmul(softmax_ref(s), v[:, cols]))
        self.site(prefix + "attn_logits", np.stack(logits))
        return self.site(prefix + "attn_out", np.concatenate(outs, axis=1))

    def block(self, x, prefix):
        h = self.site(prefix + "ln1", self.norm(x, prefix + "ln1"))
        a = self.attention(h, prefix)
        a = self.site(prefix + "proj", self.linear(a, prefix + "attn.proj"))
        x = self.site(prefix + "res1", x + a)
        h = self.site(prefix + "ln2", self.norm(x, prefix + "ln2"))
        f = self.site(prefix + "fc1", self.linear(h, prefix + "mlp.fc1"))
        g = self.site(prefix + "gelu", self.gelu(f))
        self.acts.append((prefix, g))
        f = self.site(prefix + "fc2", self.linear(g, prefix + "mlp.fc2"))
        return self.site(prefix + "res2", x + f)

    def encode(self, image):
        cfg = self.cfg
        flat = _patches(image, cfg.patch)
        t = self.site("patch", self.linear(flat, "patch_embed", kind="Conv"))
        x = self.site("embed", t + self.w["pos_embed"])
        for i in range(cfg.L_enc):
            x = self.block(x, f"enc.{i}.")
        return x

    def decode(self, z):
        cfg = self.cfg
        x = self.site("dec_in", np.concatenate([z, self.w["cls_embed"]], axis=0))
        for i in range(cfg.L_dec):
            x = self.block(x, f"dec.{i}.")
        h = self.site("dec_norm", self.norm(x, "dec_norm"))
        zp = self.site("z_proj", self.linear(h[: cfg.N], "proj_patch"))
        cp = self.site("c_proj", self.linear(h[cfg.N :], "proj_cls"))
        if self.variant.l2_norm:
            zp, cp = l2_normalize_ref(zp), l2_normalize_ref(cp)
        return self.site("logits", self.matmul(zp, cp.T))


def refine_real(logits, config: ModelConfig, interp: str = "nearest", pad_info=None) -> np.ndarray:
    """Real-valued counterpart of mask refinement."""
    gh, gw = config.grid
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape != (gh * gw, config.K):
        raise DimensionError(f"logits shape {logits.shape} != {(gh * gw, config.K)}")
    h, w = _check_pad(config, pad_info)
    grid = logits.reshape(gh, gw, config.K)
    if interp == "bilinear":
        up = bilinear_upsample_ref(grid, config.image_h, config.image_w)
    else:
        up = nearest_upsample_ref(grid, config.image_h, config.image_w)
    return argmax_classes(up[:h, :w])


def fp32_forward(image, ckpt: Checkpoint, variant: Variant = Variant(), hook=None, meters=None, pad_info=None) -> FP32Result:
    """Run the graph in real arithmetic on a floating-point checkpoint.

    ``hook(site_name, array)`` is called at every activation site, which is
    how calibration attaches its observers.
    """
    if ckpt.mode != FP32:
        raise ModeError(f"floating-point forward needs an FP32 checkpoint, got {ckpt.mode}")
    cfg = ckpt.config
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (cfg.image_h, cfg.image_w, cfg.channels):
        raise DimensionError(f"image shape {image.shape} does not match config")
    if not np.all(np.isfinite(image)):
        raise InvalidInputError("image contains non-finite values")
    meters = meters if meters is not None else TraceMeters()
    g = _Graph(ckpt, variant, hook, meters)
    logits = g.decode(g.encode(image))
    cmap = refine_real(logits, cfg, variant.interp, pad_info)
    return FP32Result(cmap, logits, g.acts, meters)


# ------------------------------------------------------------------ metrics


@dataclass
class FidelityReport:
    per_block: list
    rmse_g: float
    T: int
    N: int
    D: int


def _stack_block(acts) -> np.ndarray:
    a = np.asarray(acts, dtype=np.float64)
    return a.reshape(-1, a.shape[-1])


def rmse_g(fp_acts, int_acts) -> FidelityReport:
    """Global RMSE over blocks, rows and features.

    Both arguments are sequences over blocks; each block entry is an array
    (or list of per-sample arrays) whose last axis is the feature axis.
    """
    if len(fp_acts) != len(int_acts) or not fp_acts:
        raise DimensionError("activation lists must be non-empty and cover the same blocks")
    per_block, total, count = [], 0.0, 0
    shape = None
    for f, g in zip(fp_acts, int_acts):
        f, g = _stack_block(f), _stack_block(g)
        if f.shape != g.shape:
            raise DimensionError(f"activation shapes differ: {f.shape} vs {g.shape}")
        shape = shape or f.shape
        sq = float(((f - g) ** 2).sum())
        per_block.append(math.sqrt(sq / f.size))
        total += sq
        count += f.size
    return FidelityReport(per_block, math.sqrt(total / count), len(fp_acts), shape[0], shape[1])


def _check_maps(pred, gt):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"map shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def miou(pred, gt, K: int):
    """Per-class IoU (NaN for classes absent from both maps) and their mean."""
    pred, gt = _check_maps(pred, gt)
    for m in (pred, gt):
        if m.size and (m.min() < 0 or m.max() >= K):
            raise InvalidInputError(f"class index out of range [0, {K})")
    ious = np.full(K, np.nan)
    for k in range(K):
        p, g = pred == k, gt == k
        union = np.count_nonzero(p | g)
        if union:
            ious[k] = np.count_nonzero(p & g) / union
    present = ~np.isnan(ious)
    mean = float(ious[present].mean()) if present.any() else 1.0
    return ious, mean


def agreement(a, b) -> float:
    a, b = _check_maps(a, b)
    return float(np.mean(a == b)) if a.size else 1.0


def logit_similarity(x, y) -> float:
    """Cosine similarity of two flattened logit arrays."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise DimensionError(f"logit shapes differ: {x.shape} vs {y.shape}")
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0 or ny == 0:
        return 1.0 if nx == ny else 0.0
    return float(x @ y / (nx * ny))
