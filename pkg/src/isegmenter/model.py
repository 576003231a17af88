"""The integer segmentation graph.

A ViT encoder over non-overlapping patches, a two-block mask transformer over
patch tokens plus ``K`` class embeddings, and mask refinement by nearest
upsampling and per-pixel argmax. Every tensor between operators is a
:class:`~isegmenter.qcore.QuantizedTensor`: INT8 everywhere except the
residual stream and the attention logits/probabilities, which are INT16.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import CheckpointError, DimensionError, ModeError, NotCalibratedError
from .intkernels import (
    GeluConfig,
    LayerNormParams,
    ShiftmaxConfig,
    i_layernorm,
    int_matmul,
    lambda_shift_gelu,
    linear,
    nearest_upsample,
    residual_add,
    shiftmax,
)
from .qcore import DyadicScale, QuantizedTensor, dyadic_mul, requantize

# Fixed input quantization: pixels arrive as (code - pixel_mean) / 128.
INPUT_SCALE = DyadicScale(1, 7)

BLOCK_SITES = {
    "ln1": 8,
    "q": 8,
    "k": 8,
    "v": 8,
    "attn_logits": 16,
    "attn_out": 8,
    "proj": 8,
    "res1": 16,
    "ln2": 8,
    "fc1": 8,
    "gelu": 8,
    "fc2": 8,
    "res2": 16,
}
GLOBAL_SITES_HEAD = {"patch": 8, "embed": 16}
GLOBAL_SITES_TAIL = {"dec_in": 16, "dec_norm": 8, "z_proj": 8, "c_proj": 8, "logits": 8}

# linear layer -> (input site, output site); prefixes are expanded per block
BLOCK_LINEARS = {
    "attn.q": ("ln1", "q"),
    "attn.k": ("ln1", "k"),
    "attn.v": ("ln1", "v"),
    "attn.proj": ("attn_out", "proj"),
    "mlp.fc1": ("ln2", "fc1"),
    "mlp.fc2": ("gelu", "fc2"),
}

FP32, INT = "FP32", "INT"


@dataclass(frozen=True)
class ModelConfig:
    image_h: int = 64
    image_w: int = 64
    patch: int = 8
    channels: int = 3
    D: int = 32
    L_enc: int = 2
    L_dec: int = 2
    heads: int = 2
    K: int = 2
    mlp_ratio: int = 4
    gelu: GeluConfig = GeluConfig()
    softmax: ShiftmaxConfig = ShiftmaxConfig()
    ln_shift: int = 12
    p: int = 15
    pixel_mean: int = 128

    def __post_init__(self):
        if self.image_h % self.patch or self.image_w % self.patch:
            raise DimensionError("image size must be divisible by the patch size")
        if self.D % self.heads:
            raise DimensionError("embedding dim must be divisible by the head count")
        if self.L_dec < 1 or self.L_enc < 1:
            raise DimensionError("encoder and decoder need at least one block")
        if self.K < 2:
            raise DimensionError("need at least two classes")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_h // self.patch, self.image_w // self.patch

    @property
    def N(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def hidden(self) -> int:
        return self.D * self.mlp_ratio

    @property
    def head_dim(self) -> int:
        return self.D // self.heads

    def block_prefixes(self) -> list[str]:
        return [f"enc.{i}." for i in range(self.L_enc)] + [f"dec.{i}." for i in range(self.L_dec)]

    def to_dict(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (GeluConfig, ShiftmaxConfig)):
                for g in fields(v):
                    out[f"{f.name}.{g.name}"] = str(getattr(v, g.name))
            else:
                out[f.name] = str(v)
        return out

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "ModelConfig":
        kw = {}
        nested = {"gelu": {}, "softmax": {}}
        names = {f.name for f in fields(cls)}
        for key, val in d.items():
            head, _, tail = key.partition(".")
            if tail and head in nested:
                nested[head][tail] = int(val)
            elif key in names:
                kw[key] = int(val)
        return cls(gelu=GeluConfig(**nested["gelu"]), softmax=ShiftmaxConfig(**nested["softmax"]), **kw)


TOY_CONFIGS = {
    "d32-l2-k2": ModelConfig(D=32, L_enc=2, K=2, heads=2),
    "d32-l4-k4": ModelConfig(D=32, L_enc=4, K=4, heads=2),
    "d64-l2-k4": ModelConfig(D=64, L_enc=2, K=4, heads=4),
    "d64-l4-k2": ModelConfig(D=64, L_enc=4, K=2, heads=4),
}


def activation_sites(config: ModelConfig) -> dict[str, int]:
    """Every calibrated activation site with its bit-width, in graph order."""
    sites = dict(GLOBAL_SITES_HEAD)
    for prefix in config.block_prefixes():
        sites.update({prefix + name: k for name, k in BLOCK_SITES.items()})
    sites.update(GLOBAL_SITES_TAIL)
    return sites


def parameter_shapes(config: ModelConfig) -> dict[str, tuple]:
    D, H = config.D, config.hidden
    shapes = {
        "patch_embed.weight": (config.patch * config.patch * config.channels, D),
        "patch_embed.bias": (D,),
        "pos_embed": (config.N, D),
        "cls_embed": (config.K, D),
    }
    for prefix in config.block_prefixes():
        for ln in ("ln1", "ln2"):
            shapes[f"{prefix}{ln}.weight"] = (D,)
            shapes[f"{prefix}{ln}.bias"] = (D,)
        for name in ("attn.q", "attn.k", "attn.v", "attn.proj"):
            shapes[f"{prefix}{name}.weight"] = (D, D)
            shapes[f"{prefix}{name}.bias"] = (D,)
        shapes[f"{prefix}mlp.fc1.weight"] = (D, H)
        shapes[f"{prefix}mlp.fc1.bias"] = (H,)
        shapes[f"{prefix}mlp.fc2.weight"] = (H, D)
        shapes[f"{prefix}mlp.fc2.bias"] = (D,)
    shapes["dec_norm.weight"] = (D,)
    shapes["dec_norm.bias"] = (D,)
    shapes["proj_patch"] = (D, D)
    shapes["proj_cls"] = (D, D)
    return shapes


@dataclass
class TensorEntry:
    data: np.ndarray
    scale: DyadicScale | None = None

    def __eq__(self, other):
        return (
            isinstance(other, TensorEntry)
            and self.data.dtype == other.data.dtype
            and self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data)
            and self.scale == other.scale
        )


_WIDTH_OF = {np.dtype(np.int8): 8, np.dtype(np.int16): 16, np.dtype(np.int32): 32}


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict[str, TensorEntry]
    mode: str = FP32
    meta: dict[str, str] = field(default_factory=dict)

    def array(self, name: str) -> np.ndarray:
        try:
            return self.tensors[name].data
        except KeyError:
            raise CheckpointError(f"checkpoint has no tensor {name!r}") from None

    def qt(self, name: str) -> QuantizedTensor:
        entry = self.tensors.get(name)
        if entry is None:
            raise CheckpointError(f"checkpoint has no tensor {name!r}")
        if entry.scale is None or entry.data.dtype not in _WIDTH_OF:
            raise ModeError(f"tensor {name!r} is not an integer tensor")
        return QuantizedTensor(entry.data, _WIDTH_OF[entry.data.dtype], entry.scale)

    def site(self, name: str) -> DyadicScale:
        entry = self.tensors.get("site:" + name)
        if entry is None or entry.scale is None:
            raise NotCalibratedError(f"activation site {name!r} is not calibrated")
        return entry.scale

    def with_config(self, **changes) -> "Checkpoint":
        return Checkpoint(replace(self.config, **changes), self.tensors, self.mode, dict(self.meta))

    def __eq__(self, other):
        return (
            isinstance(other, Checkpoint)
            and self.config == other.config
            and self.mode == other.mode
            and self.meta == other.meta
            and self.tensors.keys() == other.tensors.keys()
            and all(self.tensors[k] == other.tensors[k] for k in self.tensors)
        )


def _is_bias(name: str) -> bool:
    return name.endswith(".bias")


def _is_norm(name: str) -> bool:
    return ".ln1." in name or ".ln2." in name or name.startswith("dec_norm.")


def validate_checkpoint(ckpt: Checkpoint) -> None:
    """Check the tensor table against the graph and the width contract."""
    expected = parameter_shapes(ckpt.config)
    params = {k: v for k, v in ckpt.tensors.items() if not k.startswith("site:")}
    missing = expected.keys() - params.keys()
    extra = params.keys() - expected.keys()
    if missing or extra:
        raise CheckpointError(f"tensor table mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
    for name, shape in expected.items():
        if params[name].data.shape != shape:
            raise CheckpointError(f"{name}: shape {params[name].data.shape} != {shape}")
    if ckpt.mode == FP32:
        for name, e in params.items():
            if e.data.dtype != np.float32:
                raise CheckpointError(f"FP32 checkpoint tensor {name} has dtype {e.data.dtype}")
        return
    if ckpt.mode != INT:
        raise CheckpointError(f"unknown checkpoint mode {ckpt.mode!r}")
    for name, e in ckpt.tensors.items():
        if e.data.dtype.kind == "f":
            raise CheckpointError(f"INT checkpoint holds floating-point tensor {name}")
        if e.scale is None:
            raise CheckpointError(f"INT tensor {name} has no scale")
        want = np.int32 if _is_bias(name) else np.int8
        if not name.startswith("site:") and e.data.dtype != want:
            raise CheckpointError(f"{name}: dtype {e.data.dtype}, width contract requires {np.dtype(want)}")
    sites = activation_sites(ckpt.config)
    for name, k in sites.items():
        entry = ckpt.tensors.get("site:" + name)
        if entry is None:
            raise NotCalibratedError(f"activation site {name!r} is not calibrated")
        if _WIDTH_OF.get(entry.data.dtype) != k:
            raise CheckpointError(f"site {name} must be INT{k}")


# ------------------------------------------------------------------ metering


@dataclass
class TraceMeters:
    """Floating-point event counter and per-kind bit traffic."""

    fp_ops: int = 0
    bits_read: dict[str, int] = field(default_factory=dict)
    bits_written: dict[str, int] = field(default_factory=dict)
    events: list = field(default_factory=list)

    def count_fp(self, n: int) -> None:
        self.fp_ops += int(n)

    def check(self, *arrays) -> None:
        """Count every element of a floating-point array flowing through the graph."""
        for a in arrays:
            data = a.data if isinstance(a, QuantizedTensor) else np.asarray(a)
            if data.dtype.kind in "fc":
                self.fp_ops += data.size

    def traffic(self, kind: str, reads, writes) -> None:
        """Record one metered op; ``reads``/``writes`` are ``(elements, width)`` pairs."""
        r = sum(n * w for n, w in reads)
        wr = sum(n * w for n, w in writes)
        self.bits_read[kind] = self.bits_read.get(kind, 0) + r
        self.bits_written[kind] = self.bits_written.get(kind, 0) + wr
        self.events.append((kind, tuple(reads), tuple(writes)))


def traffic_report(meters: TraceMeters, ckpt: Checkpoint | None = None) -> dict:
    """Per-kind and total bits, plus the same ops re-counted at 32-bit width."""
    kinds = sorted(set(meters.bits_read) | set(meters.bits_written))
    per_kind = {k: meters.bits_read.get(k, 0) + meters.bits_written.get(k, 0) for k in kinds}
    baseline = {k: 0 for k in kinds}
    for kind, reads, writes in meters.events:
        baseline[kind] += 32 * (sum(n for n, _ in reads) + sum(n for n, _ in writes))
    total = sum(per_kind.values())
    base_total = sum(baseline.values())
    return {
        "mode": ckpt.mode if ckpt is not None else None,
        "per_kind": per_kind,
        "bits_read": dict(meters.bits_read),
        "bits_written": dict(meters.bits_written),
        "total": total,
        "fp32_per_kind": baseline,
        "fp32_total": base_total,
        "ratio": base_total / total if total else None,
    }


# ------------------------------------------------------------------ graph ops


def _require_int(ckpt: Checkpoint) -> None:
    if ckpt.mode != INT:
        raise ModeError(f"integer inference needs an INT checkpoint, got {ckpt.mode}")


def _bias(ckpt: Checkpoint, name: str):
    entry = ckpt.tensors.get(name + ".bias")
    if entry is None:
        return None, None
    return entry.data, entry.scale


def _linear(x, ckpt, name, out_site, k_out, meters, kind="Linear"):
    W = ckpt.qt(name + ".weight") if name + ".weight" in ckpt.tensors else ckpt.qt(name)
    bias, bias_scale = _bias(ckpt, name)
    out = linear(x, W, bias, bias_scale, ckpt.site(out_site), k_out, ckpt.config.p)
    if meters is not None:
        rows = x.shape[0]
        reads = [(x.data.size, x.k), (W.data.size, W.k)]
        if bias is not None:
            reads.append((bias.size, 32))
        meters.traffic(kind, reads, [(rows * W.shape[1], 32), (out.data.size, k_out)])
        meters.check(out)
    return out


def _matmul(a, b, out_scale, k_out, p, meters):
    acc = int_matmul(a.data, b.data, a.k, b.k)
    out = requantize(acc, dyadic_mul(a.scale, b.scale, p), out_scale, k_out, p)
    if meters is not None:
        meters.traffic(
            "MatMul",
            [(a.data.size, a.k), (b.data.size, b.k)],
            [(acc.size, 32), (out.data.size, k_out)],
        )
        meters.check(acc, out)
    return out


def _layernorm_params(ckpt: Checkpoint, name: str) -> LayerNormParams:
    gamma = ckpt.qt(name + ".weight")
    beta = ckpt.tensors[name + ".bias"]
    params = LayerNormParams(gamma, beta.data, ckpt.config.ln_shift)
    if beta.scale != params.beta_scale:
        raise CheckpointError(f"{name}.bias scale does not match gamma scale * 2**-{ckpt.config.ln_shift}")
    return params


def _layernorm(x, ckpt, name, out_site, meters):
    out = i_layernorm(x, _layernorm_params(ckpt, name), ckpt.site(out_site), 8, ckpt.config.p)
    if meters is not None:
        meters.check(out)
    return out


def _patches(data: np.ndarray, patch: int) -> np.ndarray:
    H, W, C = data.shape
    gh, gw = H // patch, W // patch
    return (
        data.reshape(gh, patch, gw, patch, C)
        .transpose(0, 2, 1, 3, 4)
        .reshape(gh * gw, patch * patch * C)
    )


def quantize_image(image, config: ModelConfig | None = None) -> QuantizedTensor:
    """Map a normalized image (values on the 1/128 grid) to its INT8 codes.

    This is the sensor boundary; it runs before metering starts.
    """
    image = np.asarray(image)
    if image.dtype.kind in "iu":
        codes = image.astype(np.int64)
    else:
        codes = np.floor(image.astype(np.float64) * 128.0 + 0.5).astype(np.int64)
    return QuantizedTensor(np.clip(codes, -127, 127), 8, INPUT_SCALE)


def image_from_pixels(pixels, config: ModelConfig) -> QuantizedTensor:
    """INT8 input from 8-bit pixel codes by integer mean subtraction."""
    pixels = np.asarray(pixels).astype(np.int64)
    return QuantizedTensor(np.clip(pixels - config.pixel_mean, -127, 127), 8, INPUT_SCALE)


def patch_embed(image: QuantizedTensor, ckpt: Checkpoint, meters: TraceMeters | None = None) -> QuantizedTensor:
    """Patchify and project: a stride-``patch`` convolution as one linear."""
    _require_int(ckpt)
    cfg = ckpt.config
    if image.shape != (cfg.image_h, cfg.image_w, cfg.channels):
        raise DimensionError(f"image shape {image.shape} does not match config")
    if meters is not None:
        meters.check(image)
    flat = QuantizedTensor(_patches(image.data, cfg.patch), image.k, image.scale)
    return _linear(flat, ckpt, "patch_embed", "patch", 8, meters, kind="Conv")


def _attention(h, ckpt, prefix, meters):
    cfg = ckpt.config
    p = cfg.p
    q = _linear(h, ckpt, prefix + "attn.q", prefix + "q", 8, meters)
    k = _linear(h, ckpt, prefix + "attn.k", prefix + "k", 8, meters)
    v = _linear(h, ckpt, prefix + "attn.v", prefix + "v", 8, meters)
    s_logits = ckpt.site(prefix + "attn_logits")
    s_out = ckpt.site(prefix + "attn_out")
    dh = cfg.head_dim
    heads = []
    for j in range(cfg.heads):
        cols = slice(j * dh, (j + 1) * dh)
        qh = QuantizedTensor(q.data[:, cols], 8, q.scale)
        kt = QuantizedTensor(k.data[:, cols].T, 8, k.scale)
        vh = QuantizedTensor(v.data[:, cols], 8, v.scale)
        logits = _matmul(qh, kt, s_logits, 16, p, meters)
        probs = shiftmax(logits, cfg.softmax)
        if meters is not None:
            meters.check(probs)
        heads.append(_matmul(probs, vh, s_out, 8, p, meters).data)
    return QuantizedTensor(np.concatenate(heads, axis=1), 8, s_out)


def transformer_block(x: QuantizedTensor, ckpt: Checkpoint, prefix: str, meters=None, record=None):
    """Pre-norm block on the INT16 residual stream."""
    cfg = ckpt.config
    h = _layernorm(x, ckpt, prefix + "ln1", prefix + "ln1", meters)
    a = _attention(h, ckpt, prefix, meters)
    a = _linear(a, ckpt, prefix + "attn.proj", prefix + "proj", 8, meters)
    x = residual_add(x, a.widen(16), ckpt.site(prefix + "res1"), 16, p=cfg.p)
    h = _layernorm(x, ckpt, prefix + "ln2", prefix + "ln2", meters)
    f = _linear(h, ckpt, prefix + "mlp.fc1", prefix + "fc1", 8, meters)
    g = lambda_shift_gelu(f, cfg.gelu, ckpt.site(prefix + "gelu"), 8, cfg.p)
    if record is not None:
        record.append((prefix, g))
    f = _linear(g, ckpt, prefix + "mlp.fc2", prefix + "fc2", 8, meters)
    x = residual_add(x, f.widen(16), ckpt.site(prefix + "res2"), 16, p=cfg.p)
    if meters is not None:
        meters.check(x, g)
    return x


def encoder_forward(tokens: QuantizedTensor, ckpt: Checkpoint, meters=None, record=None) -> QuantizedTensor:
    """Add positional embeddings and run the encoder blocks.

    ``record``, if given, collects ``(block prefix, post-GELU tensor)`` pairs.
    """
    _require_int(ckpt)
    cfg = ckpt.config
    pos = ckpt.qt("pos_embed")
    if tokens.shape != pos.shape:
        raise DimensionError(f"token shape {tokens.shape} != {pos.shape}")
    x = residual_add(tokens.widen(16), pos.widen(16), ckpt.site("embed"), 16, p=cfg.p)
    for i in range(cfg.L_enc):
        x = transformer_block(x, ckpt, f"enc.{i}.", meters, record)
    return x


def decoder_forward(z: QuantizedTensor, ckpt: Checkpoint, meters=None, record=None) -> QuantizedTensor:
    """Mask transformer: joint blocks over patches and classes, then ``z' c'^T``.

    No L2 normalization: ``z'`` and ``c'`` are requantized instead.
    """
    _require_int(ckpt)
    cfg = ckpt.config
    s_in = ckpt.site("dec_in")
    zq = requantize(z.data, z.scale, s_in, 16, cfg.p)
    cls = ckpt.qt("cls_embed")
    cq = requantize(cls.data, cls.scale, s_in, 16, cfg.p)
    x = QuantizedTensor(np.concatenate([zq.data, cq.data], axis=0), 16, s_in)
    for i in range(cfg.L_dec):
        x = transformer_block(x, ckpt, f"dec.{i}.", meters, record)
    h = _layernorm(x, ckpt, "dec_norm", "dec_norm", meters)
    N = cfg.N
    patches = QuantizedTensor(h.data[:N], 8, h.scale)
    classes = QuantizedTensor(h.data[N:], 8, h.scale)
    zp = _linear(patches, ckpt, "proj_patch", "z_proj", 8, meters)
    cp = _linear(classes, ckpt, "proj_cls", "c_proj", 8, meters)
    ct = QuantizedTensor(cp.data.T, 8, cp.scale)
    return _matmul(zp, ct, ckpt.site("logits"), 8, cfg.p, meters)


def argmax_classes(scores: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over the last axis; ties go to the lowest class index."""
    return np.argmax(scores, axis=-1).astype(np.int64)


def _check_pad(config: ModelConfig, pad_info):
    if pad_info is None:
        return config.image_h, config.image_w
    h, w = pad_info
    if not (0 < h <= config.image_h and 0 < w <= config.image_w):
        raise DimensionError(f"pad_info {pad_info} inconsistent with {config.image_h}x{config.image_w}")
    return h, w


def mask_refine(logits: QuantizedTensor, config: ModelConfig, pad_info=None) -> np.ndarray:
    """Reshape patch logits, nearest-upsample, crop padding, argmax."""
    gh, gw = config.grid
    if logits.shape != (gh * gw, config.K):
        raise DimensionError(f"logits shape {logits.shape} != {(gh * gw, config.K)}")
    h, w = _check_pad(config, pad_info)
    grid = QuantizedTensor(logits.data.reshape(gh, gw, config.K), logits.k, logits.scale)
    up = nearest_upsample(grid, config.image_h, config.image_w)
    return argmax_classes(up.data[:h, :w])


def forward(image: QuantizedTensor, ckpt: Checkpoint, meters: TraceMeters | None = None, pad_info=None, record=None):
    """Full integer inference: returns ``(class_map, logits, meters)``."""
    _require_int(ckpt)
    meters = meters if meters is not None else TraceMeters()
    if not isinstance(image, QuantizedTensor):
        raise ModeError("integer forward takes a quantized image; see quantize_image")
    tokens = patch_embed(image, ckpt, meters)
    z = encoder_forward(tokens, ckpt, meters, record)
    logits = decoder_forward(z, ckpt, meters, record)
    class_map = mask_refine(logits, ckpt.config, pad_info)
    meters.check(logits, class_map)
    return class_map, logits, meters
