import struct

import numpy as np
import pytest

from isegmenter.container import (
    checkpoint_bytes,
    checkpoint_from_bytes,
    decode,
    encode,
    load_checkpoint,
    load_tensor,
    read_pgm,
    save_checkpoint,
    save_tensor,
    write_pgm,
)
from isegmenter.errors import ContainerError
from isegmenter.model import TensorEntry
from isegmenter.qcore import DyadicScale
from isegmenter.synth import load_dataset, synth_dataset, write_dataset


def test_checkpoint_round_trip(tmp_path, fp32_ckpt, int_ckpt):
    for ck in (fp32_ckpt, int_ckpt):
        path = tmp_path / f"{ck.mode}.iseg"
        n = save_checkpoint(ck, path)
        assert path.stat().st_size == n
        back = load_checkpoint(path)
        assert back == ck
        assert checkpoint_bytes(back) == checkpoint_bytes(ck)


def test_layout_bytes():
    raw = encode({"kind": "tensor"}, {"t": TensorEntry(np.array([[1, -2, 3]], np.int16), DyadicScale(5, 9))})
    cfg = b"kind=tensor"
    assert raw[:4] == b"ISEG"
    assert raw[4] == 1
    assert struct.unpack("<I", raw[5:9])[0] == len(cfg)
    assert raw[9 : 9 + len(cfg)] == cfg
    pos = 9 + len(cfg)
    assert struct.unpack("<I", raw[pos : pos + 4])[0] == 1
    pos += 4
    assert struct.unpack("<I", raw[pos : pos + 4])[0] == 1 and raw[pos + 4 : pos + 5] == b"t"
    pos += 5
    assert raw[pos : pos + 2] == bytes([2, 2])  # INT16, rank 2
    assert struct.unpack("<2I", raw[pos + 2 : pos + 10]) == (1, 3)
    pos += 10
    assert struct.unpack("<BQB", raw[pos : pos + 10]) == (1, 5, 9)
    pos += 10
    assert raw[pos:] == np.array([1, -2, 3], "<i2").tobytes()


def test_decode_rejects_malformed():
    good = encode({"kind": "tensor"}, {"x": TensorEntry(np.zeros(3, np.float32))})
    with pytest.raises(ContainerError):
        decode(b"NOPE" + good[4:])
    with pytest.raises(ContainerError):
        decode(good[:-1])
    with pytest.raises(ContainerError):
        decode(good + b"\x00")
    with pytest.raises(ContainerError):
        decode(good[:4] + b"\x07" + good[5:])
    with pytest.raises(ContainerError):
        encode({}, {"x": TensorEntry(np.zeros(2, np.float64))})


def test_int_container_rejects_float_payload(int_ckpt):
    t = dict(int_ckpt.tensors)
    t["pos_embed"] = TensorEntry(t["pos_embed"].data.astype(np.float32))
    raw = checkpoint_bytes(type(int_ckpt)(int_ckpt.config, t, int_ckpt.mode))
    with pytest.raises(ContainerError):
        checkpoint_from_bytes(raw)


def test_tensor_files(tmp_path):
    a = np.arange(12, dtype=np.float32).reshape(3, 4) / 7
    save_tensor(a, tmp_path / "a.iseg")
    e = load_tensor(tmp_path / "a.iseg")
    assert e.data.dtype == np.float32 and np.array_equal(e.data, a) and e.scale is None


def test_pgm(tmp_path):
    m = np.array([[0, 1, 2], [3, 255, 7]])
    write_pgm(tmp_path / "m.pgm", m)
    assert np.array_equal(read_pgm(tmp_path / "m.pgm"), m)
    (tmp_path / "a.pgm").write_bytes(b"P2\n# comment\n3 2\n9\n0 1 2\n3 9 7\n")
    assert read_pgm(tmp_path / "a.pgm").tolist() == [[0, 1, 2], [3, 9, 7]]
    with pytest.raises(ContainerError):
        write_pgm(tmp_path / "bad.pgm", np.array([[300]]))


def test_synth_is_deterministic(tmp_path):
    for d in ("a", "b"):
        write_dataset(tmp_path / d, synth_dataset(3, 4, 32, seed=8))
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
    data = load_dataset(tmp_path / "a")
    assert len(data) == 3
    for _, img, lbl in data:
        assert img.shape == (32, 32, 3) and img.dtype == np.float32
        assert lbl.max() < 4 and lbl.min() >= 0
        # pixels are on the fixed input grid
        assert np.array_equal(img * 128, np.round(img * 128))
