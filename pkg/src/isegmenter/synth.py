"""Synthetic scenes and hand-structured float checkpoints for testing.

Scenes are coloured rectangles on a background with smooth noise, so class
boundaries rarely fall on patch edges. The structured checkpoint encodes
colour into tokens, keeps transformer blocks close to identity apart from a few
MLP channels with long-tailed pre-activations, and fits class embeddings to
the data with least squares.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .container import load_tensor, read_pgm, save_tensor, write_pgm
from .errors import DimensionError, InvalidInputError
from .model import FP32, Checkpoint, ModelConfig, TensorEntry, _patches, parameter_shapes

PIXEL_STEP = 1.0 / 128.0


def class_colours(K: int, channels: int = 3, seed: int = 0, radius: float = 0.6) -> np.ndarray:
    """Class colours with well separated directions (token norms discard magnitude)."""
    rng = np.random.default_rng(1000 + seed)
    best, best_cos = None, np.inf
    for _ in range(256):
        c = rng.normal(size=(K, channels))
        c /= np.linalg.norm(c, axis=1, keepdims=True)
        worst = (c @ c.T - 2 * np.eye(K)).max()
        if worst < best_cos:
            best, best_cos = c, worst
    return best * radius


def make_scene(rng: np.random.Generator, size: int, K: int, colours: np.ndarray, noise: float = 0.08):
    """One ``(image, label)`` pair; the image lies on the 1/128 pixel grid."""
    label = np.zeros((size, size), dtype=np.int64)
    for _ in range(int(rng.integers(2, 5))):
        k = int(rng.integers(1, K))
        h, w = rng.integers(size // 6, size // 2 + 1, size=2)
        r, c = rng.integers(0, size - h + 1), rng.integers(0, size - w + 1)
        label[r : r + h, c : c + w] = k
    gain = rng.uniform(0.75, 1.1)
    img = colours[label] * gain
    field = rng.normal(size=(size, size, colours.shape[1]))
    field = gaussian_filter(field, sigma=(3.0, 3.0, 0.0))
    field *= noise / max(field.std(), 1e-12)
    img = np.clip(np.round((img + field) / PIXEL_STEP), -127, 127) * PIXEL_STEP
    return img.astype(np.float32), label


def synth_dataset(n: int, K: int, size: int = 64, seed: int = 0, channels: int = 3):
    if n < 1:
        raise InvalidInputError("dataset needs at least one sample")
    if K < 2:
        raise InvalidInputError("need at least two classes")
    colours = class_colours(K, channels, seed)
    rng = np.random.default_rng(seed)
    return [make_scene(rng, size, K, colours) for _ in range(n)]


def write_dataset(out_dir, pairs) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i, (img, lbl) in enumerate(pairs):
        save_tensor(img, out / f"img_{i:04d}.iseg", name="image")
        write_pgm(out / f"lbl_{i:04d}.pgm", lbl)
        written.append(out / f"img_{i:04d}.iseg")
    return written


def load_image(path, config: ModelConfig | None = None) -> np.ndarray:
    """Float image from a tensor file, or an 8-bit PGM normalised by the pixel mean."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        pix = read_pgm(path)
        mean = config.pixel_mean if config is not None else 128
        img = (pix - mean)[..., None] * PIXEL_STEP
        if config is not None and config.channels > 1:
            img = np.repeat(img, config.channels, axis=-1)
        return img.astype(np.float32)
    return np.asarray(load_tensor(path).data, dtype=np.float32)


def load_dataset(data_dir, limit: int | None = None):
    """Sorted ``(name, image, label-or-None)`` triples from a synth directory."""
    d = Path(data_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"data directory {d} does not exist")
    images = sorted(d.glob("img_*.iseg"))
    out = []
    for p in images[:limit]:
        lbl = d / p.name.replace("img_", "lbl_").replace(".iseg", ".pgm")
        out.append((p.stem, load_image(p), read_pgm(lbl) if lbl.exists() else None))
    return out


# ------------------------------------------------------------------ models


def random_checkpoint(config: ModelConfig, seed: int = 0, scale: float = 0.5) -> Checkpoint:
    """Checkpoint with Gaussian weights at fan-in-normalised scale."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".bias"):
            a = rng.normal(0.0, 0.05, size=shape)
        elif (".ln" in name or name.startswith("dec_norm")) and name.endswith(".weight"):
            a = 1.0 + rng.normal(0.0, 0.1, size=shape)
        elif len(shape) == 2 and name not in ("pos_embed", "cls_embed"):
            a = rng.normal(0.0, scale / np.sqrt(shape[0]), size=shape)
        else:
            a = rng.normal(0.0, 0.5, size=shape)
        tensors[name] = TensorEntry(a.astype(np.float32))
    return Checkpoint(config, tensors, FP32)


def _block_weights(rng, config: ModelConfig, prefix: str, tails: bool, tensors: dict) -> None:
    D, H = config.D, config.hidden
    for ln in ("ln1", "ln2"):
        tensors[f"{prefix}{ln}.weight"] = 1.0 + rng.normal(0.0, 0.05, D)
        tensors[f"{prefix}{ln}.bias"] = rng.normal(0.0, 0.02, D)
    for name in ("attn.q", "attn.k"):
        tensors[f"{prefix}{name}.weight"] = rng.normal(0.0, 1.0 / np.sqrt(D), (D, D))
        tensors[f"{prefix}{name}.bias"] = rng.normal(0.0, 0.02, D)
    for name in ("attn.v", "attn.proj"):
        tensors[f"{prefix}{name}.weight"] = rng.normal(0.0, 0.3 / np.sqrt(D), (D, D))
        tensors[f"{prefix}{name}.bias"] = np.zeros(D)
    fc1 = rng.normal(0.0, 0.8 / np.sqrt(D), (D, H))
    b1 = rng.normal(0.0, 0.1, H)
    fc2 = rng.normal(0.0, 0.6 / np.sqrt(D * H), (H, D))
    if tails:
        # a couple of strongly positive channels and a few strongly negative
        # ones; their outputs are not read back by fc2
        n_pos, n_neg = 2, max(2, H // 32)
        b1[:n_pos] = rng.uniform(10.0, 11.0, n_pos)
        fc1[:, :n_pos] *= 0.3
        b1[n_pos : n_pos + n_neg] = rng.uniform(-16.0, -9.0, n_neg)
        fc1[:, n_pos : n_pos + n_neg] *= 3.0
        fc2[: n_pos + n_neg] = 0.0
    tensors[f"{prefix}mlp.fc1.weight"] = fc1
    tensors[f"{prefix}mlp.fc1.bias"] = b1
    tensors[f"{prefix}mlp.fc2.weight"] = fc2
    tensors[f"{prefix}mlp.fc2.bias"] = np.zeros(D)


def _to_checkpoint(config, arrays) -> Checkpoint:
    return Checkpoint(config, {k: TensorEntry(np.asarray(v, dtype=np.float32)) for k, v in arrays.items()}, FP32)


def structured_checkpoint(config: ModelConfig, pairs, seed: int = 0, tails: bool = True, ridge: float = 1e-4,
                          rank: int = 12) -> Checkpoint:
    """A float checkpoint whose segmentation is meaningful on ``pairs``.

    Patch tokens embed the mean patch colour; blocks are near-identity; the
    class projection is solved by ridge regression of pixel labels on the
    normalized, bilinearly upsampled decoder features.
    """
    from .reference import Variant, bilinear_upsample_ref, fp32_forward, l2_normalize_ref

    if not pairs:
        raise InvalidInputError("structured checkpoint needs data to fit on")
    if pairs[0][0].shape != (config.image_h, config.image_w, config.channels):
        raise DimensionError("data does not match the config image shape")
    rng = np.random.default_rng(seed)
    D, C, P = config.D, config.channels, config.patch
    E = rng.normal(0.0, 1.0, (C, D))
    E *= 2.5 / np.linalg.norm(E, axis=1, keepdims=True)
    t = {}
    t["patch_embed.weight"] = np.repeat(E[None], P * P, axis=0).reshape(P * P * C, D) / (P * P)
    t["patch_embed.bias"] = rng.normal(0.0, 0.05, D)
    t["pos_embed"] = rng.normal(0.0, 0.1, (config.N, D))
    t["cls_embed"] = rng.normal(0.0, 1.0, (config.K, D))
    for prefix in config.block_prefixes():
        _block_weights(rng, config, prefix, tails, t)
    t["dec_norm.weight"] = np.ones(D)
    t["dec_norm.bias"] = np.zeros(D)
    t["proj_patch"] = np.eye(D)
    t["proj_cls"] = np.eye(D)

    # Fit the class projection the way a segmenter is trained: pixel labels
    # against L2-normalized patch features refined by bilinear upsampling.
    # Logits are linear in the features, so upsampling the features is the
    # same as upsampling the logits.
    ckpt = _to_checkpoint(config, t)
    gh, gw = config.grid
    feats, cls_feats, targets = [], [], []

    def grab(name, x):
        if name == "dec_norm":
            feats.append(x[: config.N])
            cls_feats.append(x[config.N :])

    for img, lbl in pairs:
        fp32_forward(img, ckpt, Variant(), hook=grab)
        z = l2_normalize_ref(feats[-1]).reshape(gh, gw, D)
        feats[-1] = bilinear_upsample_ref(z, config.image_h, config.image_w).reshape(-1, D)
        targets.append(np.eye(config.K)[lbl.ravel()])
    Z = np.concatenate(feats)
    Y = np.concatenate(targets) * 2.0 - 1.0
    # leading principal directions only, so the class vectors do not lean on
    # low-variance feature directions
    _, _, Vt = np.linalg.svd(Z, full_matrices=False)
    V = Vt[: min(rank, D)].T
    Zr = Z @ V
    Wc = V @ np.linalg.solve(Zr.T @ Zr + ridge * len(Z) * np.eye(V.shape[1]), Zr.T @ Y)  # [D, K]
    Ch = np.mean(cls_feats, axis=0)  # [K, D]
    t["proj_cls"] = np.linalg.pinv(Ch) @ Wc.T
    return _to_checkpoint(config, t)
