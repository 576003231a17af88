import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from isegmenter.errors import CheckpointError, DimensionError, ModeError, NotCalibratedError
from isegmenter.model import (
    INPUT_SCALE,
    INT,
    Checkpoint,
    ModelConfig,
    TensorEntry,
    TraceMeters,
    _linear,
    activation_sites,
    forward,
    image_from_pixels,
    mask_refine,
    parameter_shapes,
    patch_embed,
    quantize_image,
    traffic_report,
    validate_checkpoint,
)
from isegmenter.qcore import DyadicScale, QuantizedTensor, dequantize, to_dyadic
from isegmenter.reference import fp32_forward


def test_config_shapes():
    cfg = ModelConfig(image_h=8, image_w=8, patch=4)
    assert cfg.grid == (2, 2) and cfg.N == 4
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    for bad in (dict(image_h=10), dict(D=30, heads=4), dict(L_dec=0), dict(K=1)):
        with pytest.raises(DimensionError):
            ModelConfig(**bad)


def test_int_checkpoint_widths(int_ckpt):
    validate_checkpoint(int_ckpt)
    for name, e in int_ckpt.tensors.items():
        assert e.data.dtype.kind == "i"
        if name.startswith("site:"):
            continue
        assert e.data.dtype == (np.int32 if name.endswith(".bias") else np.int8)
    sites = activation_sites(int_ckpt.config)
    for prefix in int_ckpt.config.block_prefixes():
        assert sites[prefix + "res1"] == sites[prefix + "res2"] == 16
    assert sites["embed"] == 16


def test_validator_rejects_broken_tables(int_ckpt):
    t = dict(int_ckpt.tensors)
    del t["site:enc.0.gelu"]
    with pytest.raises(NotCalibratedError, match="enc.0.gelu"):
        validate_checkpoint(Checkpoint(int_ckpt.config, t, INT))

    t = dict(int_ckpt.tensors)
    t["pos_embed"] = TensorEntry(t["pos_embed"].data.astype(np.float32), t["pos_embed"].scale)
    with pytest.raises(CheckpointError):
        validate_checkpoint(Checkpoint(int_ckpt.config, t, INT))

    t = dict(int_ckpt.tensors)
    t["enc.0.attn.q.weight"] = TensorEntry(t["enc.0.attn.q.weight"].data.astype(np.int16), t["enc.0.attn.q.weight"].scale)
    with pytest.raises(CheckpointError):
        validate_checkpoint(Checkpoint(int_ckpt.config, t, INT))

    t = dict(int_ckpt.tensors)
    del t["proj_cls"]
    with pytest.raises(CheckpointError, match="proj_cls"):
        validate_checkpoint(Checkpoint(int_ckpt.config, t, INT))


def test_forward_contract(int_ckpt, pairs):
    cfg = int_ckpt.config
    img = quantize_image(pairs[1][0])
    cmap, logits, meters = forward(img, int_ckpt)
    assert cmap.shape == (cfg.image_h, cfg.image_w)
    assert cmap.min() >= 0 and cmap.max() < cfg.K
    assert logits.shape == (cfg.N, cfg.K) and logits.k == 8
    assert meters.fp_ops == 0
    again, logits2, _ = forward(img, int_ckpt)
    assert np.array_equal(cmap, again) and np.array_equal(logits.data, logits2.data)


def test_forward_is_patch_blockwise(int_ckpt, pairs):
    cfg = int_ckpt.config
    cmap, _, _ = forward(quantize_image(pairs[2][0]), int_ckpt)
    P = cfg.patch
    blocks = cmap.reshape(cfg.grid[0], P, cfg.grid[1], P)
    assert np.all(blocks == blocks[:, :1, :, :1])


def test_forward_mode_errors(int_ckpt, fp32_ckpt, pairs):
    with pytest.raises(ModeError):
        forward(quantize_image(pairs[0][0]), fp32_ckpt)
    with pytest.raises(ModeError):
        forward(pairs[0][0], int_ckpt)
    with pytest.raises(ModeError):
        fp32_forward(pairs[0][0], int_ckpt)


def test_meter_counts_float_payloads():
    m = TraceMeters()
    m.check(np.zeros(5, np.int32), np.zeros(3, np.float32))
    assert m.fp_ops == 3


def test_zero_image_gives_bias_tokens(int_ckpt):
    cfg = int_ckpt.config
    zero = QuantizedTensor(np.zeros((cfg.image_h, cfg.image_w, cfg.channels), np.int64), 8, INPUT_SCALE)
    tokens = patch_embed(zero, int_ckpt)
    bias = int_ckpt.tensors["patch_embed.bias"]
    expect = bias.data * bias.scale.value
    assert np.all(tokens.data == tokens.data[0])
    assert np.abs(dequantize(tokens)[0] - expect).max() <= tokens.scale.value


def test_image_from_pixels(config):
    pix = np.full((config.image_h, config.image_w, config.channels), 200)
    q = image_from_pixels(pix, config)
    assert q.k == 8 and np.all(q.data == 72) and q.scale == INPUT_SCALE


def test_mask_refine_blocks_ties_and_crop():
    cfg = ModelConfig(image_h=8, image_w=8, patch=4, D=8, heads=2, K=3)
    logits = QuantizedTensor(np.array([[5, 1, 0], [0, 7, 7], [2, 2, 2], [0, 0, 9]]), 8, to_dyadic(0.1))
    cmap = mask_refine(logits, cfg)
    assert np.array_equal(cmap, np.kron(np.array([[0, 1], [0, 2]]), np.ones((4, 4), np.int64)))
    assert mask_refine(logits, cfg, pad_info=(5, 6)).shape == (5, 6)
    with pytest.raises(DimensionError):
        mask_refine(logits, cfg, pad_info=(9, 8))


def _single_linear_ckpt(D):
    rng = np.random.default_rng(0)
    t = {
        "l.weight": TensorEntry(rng.integers(-127, 128, (D, D)).astype(np.int8), to_dyadic(0.01)),
        "l.bias": TensorEntry(rng.integers(-1000, 1000, D).astype(np.int32), to_dyadic(0.05 * 0.01)),
        "site:out": TensorEntry(np.zeros((), np.int8), to_dyadic(0.1)),
    }
    return Checkpoint(ModelConfig(), t, INT)


@pytest.mark.parametrize("D", [4, 32])
def test_single_linear_traffic(D):
    ckpt = _single_linear_ckpt(D)
    x = QuantizedTensor(np.ones((1, D), np.int64), 8, to_dyadic(0.05))
    m = TraceMeters()
    _linear(x, ckpt, "l", "out", 8, m)
    rep = traffic_report(m)
    assert m.bits_read["Linear"] == D * 8 + D * D * 8 + D * 32
    assert m.bits_written["Linear"] == D * 32 + D * 8
    assert rep["fp32_total"] == 32 * (D + D * D + D + D + D)
    assert traffic_report(TraceMeters())["total"] == 0


def test_fp32_metering_matches_int_events(int_ckpt, fp32_ckpt, pairs):
    _, _, mi = forward(quantize_image(pairs[0][0]), int_ckpt)
    rf = fp32_forward(pairs[0][0], fp32_ckpt)
    ri, rr = traffic_report(mi), traffic_report(rf.meters)
    assert ri["fp32_total"] == rr["fp32_total"] == rr["total"]
    assert 2.0 <= ri["ratio"] <= 4.0
    assert rf.meters.fp_ops > 0


@settings(max_examples=5, deadline=None)
@given(st.integers(-3, 3))
def test_decoder_power_of_two_rescale(int_ckpt, pairs, s):
    # scaling the class projection weights, its output site and the logits
    # site by 2**s composes exactly through the dyadic ratios
    t = dict(int_ckpt.tensors)

    def rescale(name):
        e = t[name]
        b, c = e.scale.b, e.scale.c - s
        t[name] = TensorEntry(e.data, DyadicScale(b, c))

    for name in ("proj_cls", "site:c_proj", "site:logits"):
        rescale(name)
    other = Checkpoint(int_ckpt.config, t, INT)
    img = quantize_image(pairs[3][0])
    cmap_a, la, _ = forward(img, int_ckpt)
    cmap_b, lb, _ = forward(img, other)
    assert np.array_equal(cmap_a, cmap_b)
    assert np.array_equal(la.data, lb.data)
    assert lb.scale.value == la.scale.value * 2.0**s


def test_parameter_table_matches_fp32(fp32_ckpt):
    shapes = parameter_shapes(fp32_ckpt.config)
    assert {k: v.data.shape for k, v in fp32_ckpt.tensors.items()} == shapes
