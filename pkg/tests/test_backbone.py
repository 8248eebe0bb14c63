import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from bftrans import tensor as T
from bftrans.backbone import BackboneConfig, FeaturePair, correlate, extract, init_backbone, init_correlation, xcorr_pixel
from bftrans.params import ParamStore
from bftrans.tensor import DimensionError, Tensor


def backbone_params(cfg, seed=0):
    ps = ParamStore()
    rng = np.random.default_rng(seed)
    init_backbone(ps, cfg, rng)
    init_correlation(ps, cfg, rng)
    return ps


def test_desk_shapes():
    cfg = BackboneConfig()
    ps = backbone_params(cfg)
    img = Tensor(np.random.default_rng(0).uniform(size=(1, 3, 64, 64)))
    f = extract(img, cfg, ps)
    assert f.f3.shape == f.f4.shape == (1, cfg.d, 8, 8)


def test_large_preset_shapes():
    cfg = BackboneConfig.large()
    ps = backbone_params(cfg)
    f = extract(Tensor(np.zeros((3, 256, 256))), cfg, ps)
    assert f.f3.shape == f.f4.shape == (192, 16, 16)


@settings(max_examples=15, deadline=None)
@given(
    st.sampled_from([(1, 1, 2, 2), (1, 2, 2, 2), (2, 2, 2, 2), (2, 1, 1, 2)]),
    st.integers(1, 3),
    st.integers(1, 3),
)
def test_shapes_follow_config(strides, gh, gw):
    stride = int(np.prod(strides))
    cfg = BackboneConfig(d=3, stage_channels=(2, 2, 3, 3), strides=strides, template_size=stride, search_size=stride)
    ps = backbone_params(cfg)
    f = extract(Tensor(np.ones((3, gh * stride, gw * stride))), cfg, ps)
    assert f.f3.shape == f.f4.shape == (3, gh, gw)


def test_zero_input_zero_bias_gives_zero():
    cfg = BackboneConfig()
    ps = backbone_params(cfg)
    f = extract(Tensor(np.zeros((3, 40, 40))), cfg, ps)
    assert not f.f3.data.any() and not f.f4.data.any()


def test_rejects_bad_configs():
    with pytest.raises(ValueError):
        BackboneConfig(strides=(2, 2, 2, 1))
    with pytest.raises(ValueError):
        BackboneConfig(template_size=42)
    with pytest.raises(ValueError):
        BackboneConfig(corr_mode="nope")


def _identity_corr(d, mode="depthwise", hz=1):
    ps = ParamStore()
    in_ch = d if mode == "depthwise" else hz * hz
    for k in (3, 4):
        ps.add(f"corr.c{k}.w", np.eye(d, in_ch).reshape(d, in_ch, 1, 1))
        ps.add(f"corr.c{k}.b", np.zeros(d))
    return ps


@pytest.mark.parametrize("seed", range(10))
def test_correlate_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    d, k = 4, [3, 5][seed % 2]
    z3, z4 = rng.uniform(-1, 1, (2, d, k, k))
    x3, x4 = rng.uniform(-1, 1, (2, d, 9, 9))
    m3, m4 = correlate(FeaturePair(Tensor(z3), Tensor(z4)), FeaturePair(Tensor(x3), Tensor(x4)), _identity_corr(d))
    np.testing.assert_allclose(m3.data, oracles.xcorr_depthwise(z3, x3), atol=1e-5)
    np.testing.assert_allclose(m4.data, oracles.xcorr_depthwise(z4, x4), atol=1e-5)


def test_pixel_mode_matches_oracle():
    rng = np.random.default_rng(3)
    z, x = rng.uniform(-1, 1, (1, 3, 2, 2)), rng.uniform(-1, 1, (1, 3, 5, 5))
    out = xcorr_pixel(Tensor(z), Tensor(x)).data[0]
    for u in range(2):
        for v in range(2):
            kernel = z[0, :, u, v].reshape(1, 3, 1, 1)
            np.testing.assert_allclose(out[u * 2 + v], oracles.conv2d(x[0], kernel)[0], atol=1e-5)


def test_zero_template_zero_response():
    z = FeaturePair(Tensor(np.zeros((2, 3, 3))), Tensor(np.zeros((2, 3, 3))))
    x = np.random.default_rng(0).uniform(size=(2, 7, 7))
    m3, m4 = correlate(z, FeaturePair(Tensor(x), Tensor(x)), _identity_corr(2))
    assert not m3.data.any() and not m4.data.any()


def test_channel_mismatch():
    z = FeaturePair(Tensor(np.ones((2, 3, 3))), Tensor(np.ones((2, 3, 3))))
    x = FeaturePair(Tensor(np.ones((3, 7, 7))), Tensor(np.ones((3, 7, 7))))
    with pytest.raises(DimensionError):
        correlate(z, x, _identity_corr(2))


def _planted(rng, row, col, k=3, size=11, c=3):
    x = rng.uniform(-0.2, 0.2, (c, size, size))
    z = rng.uniform(0.9, 1.0, (c, k, k))
    x[:, row : row + k, col : col + k] = z
    return z, x


@pytest.mark.parametrize("seed", range(5))
def test_planted_patch_is_argmax(seed):
    rng = np.random.default_rng(seed)
    row, col = rng.integers(1, 7, size=2)
    z, x = _planted(rng, row, col)
    resp = T.xcorr_depthwise(Tensor(z), Tensor(x)).data
    for ch in range(3):
        i, j = np.unravel_index(np.argmax(resp[ch]), resp[ch].shape)
        assert (i, j) == (row + 1, col + 1)  # cell index is the patch centre


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(-1, 1), st.integers(-1, 1), st.integers(0, 2**16))
def test_translation_moves_argmax(row, col, dy, dx, seed):
    rng = np.random.default_rng(seed)
    z = rng.uniform(0.9, 1.0, (2, 3, 3))
    base = rng.uniform(-0.2, 0.2, (2, 11, 11))

    def peak(r, c):
        x = base.copy()
        x[:, r : r + 3, c : c + 3] = z
        resp = T.xcorr_depthwise(Tensor(z), Tensor(x)).data.sum(axis=0)
        return np.unravel_index(np.argmax(resp), resp.shape)

    (i0, j0), (i1, j1) = peak(row, col), peak(row + dy, col + dx)
    assert (i1 - i0, j1 - j0) == (dy, dx)
