"""Binary checkpoint/tensor container and PGM label maps.

Layout, all integers little-endian::

    b"ISEG" | version u8 | config_len u32 | config (key=value lines, UTF-8)
    | tensor_count u32 | tensors...

    tensor: name_len u32 | name (UTF-8) | dtype u8 | rank u8 | dims u32 * rank
            | has_scale u8 [| b u64 | c u8] | payload
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ContainerError
from .model import FP32, INT, Checkpoint, ModelConfig, TensorEntry
from .qcore import DyadicScale

MAGIC = b"ISEG"
VERSION = 1

DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("i1"), 2: np.dtype("<i2"), 3: np.dtype("<i4")}
CODE_OF = {np.dtype(np.float32): 0, np.dtype(np.int8): 1, np.dtype(np.int16): 2, np.dtype(np.int32): 3}

KIND_CHECKPOINT = "checkpoint"
KIND_TENSOR = "tensor"


def _encode_config(items: dict[str, str]) -> bytes:
    lines = []
    for k, v in items.items():
        if "=" in k or "\n" in k or "\n" in v:
            raise ContainerError(f"config entry {k!r} cannot be encoded")
        lines.append(f"{k}={v}")
    return "\n".join(lines).encode("utf-8")


def _decode_config(raw: bytes) -> dict[str, str]:
    out = {}
    for line in raw.decode("utf-8").splitlines():
        if not line:
            continue
        k, sep, v = line.partition("=")
        if not sep:
            raise ContainerError(f"malformed config line {line!r}")
        out[k] = v
    return out


def encode(config: dict[str, str], tensors: dict[str, TensorEntry]) -> bytes:
    buf = io.BytesIO()
    cfg = _encode_config(config)
    buf.write(MAGIC)
    buf.write(struct.pack("<BI", VERSION, len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(tensors)))
    for name, entry in tensors.items():
        data = np.asarray(entry.data)
        code = CODE_OF.get(data.dtype)
        if code is None:
            raise ContainerError(f"tensor {name!r} has unsupported dtype {data.dtype}")
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<BB", code, data.ndim))
        buf.write(struct.pack(f"<{data.ndim}I", *data.shape))
        if entry.scale is None:
            buf.write(b"\x00")
        else:
            buf.write(struct.pack("<BQB", 1, entry.scale.b, entry.scale.c))
        buf.write(np.ascontiguousarray(data, dtype=DTYPE_CODES[code]).tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise ContainerError("container is truncated")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(raw: bytes) -> tuple[dict[str, str], dict[str, TensorEntry]]:
    r = _Reader(raw)
    if r.take(4) != MAGIC:
        raise ContainerError("not an ISEG container (bad magic)")
    version, cfg_len = r.unpack("<BI")
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    config = _decode_config(r.take(cfg_len))
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8")
        code, rank = r.unpack("<BB")
        if code not in DTYPE_CODES:
            raise ContainerError(f"tensor {name!r} has unknown dtype code {code}")
        dims = r.unpack(f"<{rank}I")
        (flag,) = r.unpack("<B")
        scale = None
        if flag == 1:
            b, c = r.unpack("<QB")
            scale = DyadicScale(b, c)
        elif flag != 0:
            raise ContainerError(f"tensor {name!r} has bad scale flag {flag}")
        dt = DTYPE_CODES[code]
        n = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(dims)
        tensors[name] = TensorEntry(data.astype(dt.newbyteorder("="), copy=True), scale)
    if r.pos != len(raw):
        raise ContainerError("trailing bytes after last tensor")
    return config, tensors


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    config = {"kind": KIND_CHECKPOINT, "mode": ckpt.mode, **ckpt.config.to_dict()}
    config.update({"meta." + k: v for k, v in ckpt.meta.items()})
    return encode(config, ckpt.tensors)


def checkpoint_from_bytes(raw: bytes) -> Checkpoint:
    config, tensors = decode(raw)
    if config.get("kind") != KIND_CHECKPOINT:
        raise ContainerError("container does not hold a checkpoint")
    mode = config.get("mode")
    if mode not in (FP32, INT):
        raise ContainerError(f"unknown checkpoint mode {mode!r}")
    if mode == INT and any(e.data.dtype.kind == "f" for e in tensors.values()):
        raise ContainerError("INT container holds floating-point tensors")
    meta = {k[5:]: v for k, v in config.items() if k.startswith("meta.")}
    model_keys = {k: v for k, v in config.items() if k not in ("kind", "mode") and not k.startswith("meta.")}
    try:
        cfg = ModelConfig.from_dict(model_keys)
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"bad model config in container: {exc}") from exc
    return Checkpoint(cfg, tensors, mode, meta)


def save_checkpoint(ckpt: Checkpoint, path) -> int:
    raw = checkpoint_bytes(ckpt)
    Path(path).write_bytes(raw)
    return len(raw)


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())


def save_tensor(array, path, name: str = "data", scale: DyadicScale | None = None) -> None:
    entry = TensorEntry(np.asarray(array), scale)
    Path(path).write_bytes(encode({"kind": KIND_TENSOR}, {name: entry}))


def load_tensor(path) -> TensorEntry:
    config, tensors = decode(Path(path).read_bytes())
    if config.get("kind") != KIND_TENSOR or len(tensors) != 1:
        raise ContainerError(f"{path} is not a single-tensor file")
    return next(iter(tensors.values()))


# ------------------------------------------------------------------ PGM


def write_pgm(path, image, maxval: int = 255) -> None:
    """Binary (P5) greyscale map; values must fit in one byte."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ContainerError("PGM needs a 2-D map")
    if img.size and (img.min() < 0 or img.max() > maxval or maxval > 255):
        raise ContainerError("PGM values out of range")
    h, w = img.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + img.astype(np.uint8).tobytes())


def _pgm_tokens(raw: bytes, count: int, pos: int):
    out = []
    while len(out) < count:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ContainerError("PGM header is truncated")
        out.append(raw[start:pos])
    return out, pos


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _pgm_tokens(raw, 4, 0)
    w, h, maxval = int(w), int(h), int(maxval)
    if magic == b"P5":
        if maxval > 255:
            raise ContainerError("16-bit PGM is not supported")
        body = raw[pos + 1 : pos + 1 + w * h]
        if len(body) != w * h:
            raise ContainerError("PGM payload is truncated")
        return np.frombuffer(body, dtype=np.uint8).reshape(h, w).astype(np.int64)
    if magic == b"P2":
        values = raw[pos:].split()
        if len(values) < w * h:
            raise ContainerError("PGM payload is truncated")
        return np.array([int(v) for v in values[: w * h]], dtype=np.int64).reshape(h, w)
    raise ContainerError(f"unsupported PGM magic {magic!r}")
