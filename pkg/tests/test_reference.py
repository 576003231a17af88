import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from isegmenter.errors import DimensionError, InvalidInputError
from isegmenter.model import activation_sites
from isegmenter.reference import (
    FULL_BASELINE,
    INT_MATCHED,
    Variant,
    agreement,
    bilinear_upsample_ref,
    fp32_forward,
    gelu_ref,
    l2_normalize_ref,
    layernorm_ref,
    logit_similarity,
    miou,
    rmse_g,
    shift_gelu_real,
    softmax_ref,
)

maps = arrays(np.int64, st.tuples(st.integers(1, 8), st.integers(1, 8)), elements=st.integers(0, 3))


def test_gelu_and_softmax():
    assert gelu_ref([0.0])[0] == 0.0
    assert gelu_ref([0.0], "sigmoid")[0] == 0.0
    assert gelu_ref([3.0])[0] == pytest.approx(2.99595, abs=1e-5)
    assert np.allclose(softmax_ref(np.full(7, 3.3)), 1 / 7)
    assert np.isclose(layernorm_ref(np.array([-2.0, 2.0])), [-1, 1], atol=1e-6).all()
    with pytest.raises(InvalidInputError):
        gelu_ref([1.0], "tanh")


def test_shift_gelu_real_tracks_sigmoid_form():
    x = np.linspace(-4, 4, 33)[None]
    assert np.abs(shift_gelu_real(x, lam=6) - gelu_ref(x, "sigmoid")).max() < 0.15


def test_bilinear():
    c = np.full((3, 4, 2), 1.5)
    assert np.allclose(bilinear_upsample_ref(c, 7, 9), 1.5)
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    up = bilinear_upsample_ref(x, 3, 3)
    assert up[1, 1] == pytest.approx(2.5)
    assert up[0, 0] == 1.0 and up[2, 2] == 4.0


def test_l2_normalize():
    v = np.array([[0.6, 0.8], [0.0, 0.0], [3.0, 4.0]])
    out = l2_normalize_ref(v)
    assert np.allclose(out[0], [0.6, 0.8])
    assert np.array_equal(out[1], [0.0, 0.0])
    assert np.allclose(out[2], [0.6, 0.8])


def test_variants():
    assert INT_MATCHED.l2_norm is False and INT_MATCHED.interp == "nearest"
    assert FULL_BASELINE.l2_norm is True and FULL_BASELINE.interp == "bilinear"
    with pytest.raises(InvalidInputError):
        Variant(interp="bicubic")


def test_miou_examples():
    gt = np.array([[0, 0, 1, 1]])
    assert miou(gt, gt, 2)[1] == 1.0
    assert miou(np.zeros((2, 2), int), np.ones((2, 2), int), 2)[1] == 0.0
    ious, mean = miou(np.zeros((1, 4), int), gt, 2)
    assert ious.tolist() == [0.5, 0.0] and mean == 0.25
    ious, _ = miou(np.zeros((1, 4), int), gt, 3)
    assert np.isnan(ious[2])
    with pytest.raises(InvalidInputError):
        miou(gt, gt + 5, 2)
    with pytest.raises(DimensionError):
        miou(gt, gt.T, 2)


def test_agreement_and_cosine():
    a = np.array([[0, 1], [1, 0]])
    assert agreement(a, a) == 1.0
    assert agreement(a, 1 - a) == 0.0
    x = np.random.default_rng(0).normal(size=(5, 3))
    assert logit_similarity(x, 2 * x) == pytest.approx(1.0)
    assert logit_similarity(x, -x) == pytest.approx(-1.0)


def test_rmse_g_examples():
    rng = np.random.default_rng(1)
    acts = [rng.normal(size=(4, 6)), rng.normal(size=(5, 6))]
    assert rmse_g(acts, acts).rmse_g == 0.0
    rep = rmse_g(acts, [a + 0.3 for a in acts])
    assert rep.rmse_g == pytest.approx(0.3)
    assert rep.per_block == pytest.approx([0.3, 0.3])
    with pytest.raises(DimensionError):
        rmse_g(acts, acts[:1])
    with pytest.raises(DimensionError):
        rmse_g([acts[0]], [acts[1]])


@settings(max_examples=100, deadline=None)
@given(
    arrays(np.int64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=st.integers(-320, 320)),
    arrays(np.int64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=st.integers(-320, 320)),
)
def test_rmse_g_is_a_metric(a, b):
    # values on a 1/64 grid so squared differences cannot underflow
    a = a / 64.0
    b = np.resize(b, a.shape) / 64.0
    d = rmse_g([a], [b]).rmse_g
    assert d >= 0
    assert d == pytest.approx(rmse_g([b], [a]).rmse_g)
    assert (d == 0) == np.array_equal(a, b)


@settings(max_examples=100, deadline=None)
@given(maps, maps, st.permutations(range(4)))
def test_miou_range_and_relabel(p, g, perm):
    g = np.resize(g, p.shape)
    _, m = miou(p, g, 4)
    assert 0.0 <= m <= 1.0
    lut = np.array(perm)
    assert miou(lut[p], lut[g], 4)[1] == pytest.approx(m)


def test_fp32_forward_sites(fp32_ckpt, pairs):
    seen = []
    r = fp32_forward(pairs[0][0], fp32_ckpt, hook=lambda name, x: seen.append(name))
    cfg = fp32_ckpt.config
    assert r.class_map.shape == (cfg.image_h, cfg.image_w)
    assert r.logits.shape == (cfg.N, cfg.K)
    assert len(r.activations) == cfg.L_enc + cfg.L_dec
    assert set(seen) == set(activation_sites(cfg))


def test_int_path_close_to_matched_reference(int_ckpt, fp32_ckpt, pairs):
    from isegmenter.reports import run

    for img, _ in pairs[4:]:
        a = run(int_ckpt, img).logits
        b = fp32_forward(img, fp32_ckpt, INT_MATCHED).logits
        assert logit_similarity(a, b) > 0.97
