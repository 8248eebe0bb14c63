import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from bftrans import tensor as T
from bftrans.gradcheck import gradcheck
from bftrans.params import ParamStore
from bftrans.tape import TapeConfig, channel_weights, encode, init_tape, sinusoidal_map, spatial_weights
from bftrans.tensor import Tensor
from conftest import randomize

P = "t"


def tape_params(d=6, seed=0, cfg=TapeConfig(), random=True):
    ps = ParamStore()
    init_tape(ps, P, d, cfg, np.random.default_rng(seed))
    if random:
        randomize(ps, seed, scale=0.5)
    return ps


def zero_params(d=6):
    ps = tape_params(d, random=False)
    for _, t in ps.items():
        t.data[...] = 0
    return ps


def oracle_args(ps):
    g = lambda n: ps[f"{P}.{n}"].data.astype(np.float64)  # noqa: E731
    return g("mlp1.w"), g("mlp1.b"), g("mlp2.w"), g("mlp2.b"), g("conv.w"), g("conv.b")


def test_zero_mlp_gives_half():
    ps = zero_params()
    f = Tensor(np.random.default_rng(0).normal(size=(6, 5, 4)))
    assert np.all(channel_weights(f, ps, P).data == 0.5)
    assert np.all(spatial_weights(f, ps, P).data == 0.5)


def test_alpha_zero_is_identity():
    ps = tape_params()
    ps[f"{P}.alpha"].data[...] = 0.0
    f = np.random.default_rng(1).normal(size=(2, 6, 5, 5)).astype(np.float32)
    out = encode(Tensor(f), ps, P)
    assert out.data.dtype == np.float32
    assert np.array_equal(out.data, f)


def test_alpha_one_zero_params_adds_quarter():
    ps = zero_params()
    ps[f"{P}.alpha"].data[...] = 1.0
    f = np.random.default_rng(2).normal(size=(6, 3, 3)).astype(np.float32)
    np.testing.assert_allclose(encode(Tensor(f), ps, P).data, f + 0.25, atol=1e-6)


def test_constant_map_pools_agree():
    f = np.full((6, 4, 4), 1.5)
    assert np.array_equal(T.global_pool(Tensor(f), "max").data, T.global_pool(Tensor(f), "avg").data)
    assert np.array_equal(oracles.spatial_pool(f, "max"), oracles.spatial_pool(f, "avg"))


def test_single_channel_pools_equal_plane():
    f = np.random.default_rng(3).normal(size=(1, 4, 5)).astype(np.float32)
    for mode in ("max", "avg"):
        np.testing.assert_array_equal(T.channel_pool(Tensor(f), mode).data, f)


@pytest.mark.parametrize("seed", range(10))
def test_channel_weights_oracle(seed):
    ps = tape_params(seed=seed)
    f = np.random.default_rng(seed).uniform(-1, 1, (6, 4, 5))
    w1, b1, w2, b2, _, _ = oracle_args(ps)
    np.testing.assert_allclose(channel_weights(Tensor(f), ps, P).data, oracles.tape_channel(f, w1, b1, w2, b2), atol=1e-6)


@pytest.mark.parametrize("seed", range(10))
def test_spatial_weights_oracle(seed):
    ps = tape_params(seed=seed)
    f = np.random.default_rng(seed).uniform(-1, 1, (6, 5, 5))
    *_, kw, kb = oracle_args(ps)
    np.testing.assert_allclose(spatial_weights(Tensor(f), ps, P).data, oracles.tape_spatial(f, kw, kb), atol=1e-6)


@pytest.mark.parametrize("seed", range(10))
def test_encode_oracle(seed):
    ps = tape_params(seed=seed)
    f = np.random.default_rng(seed).uniform(-1, 1, (6, 4, 4))
    alpha = float(ps[f"{P}.alpha"].data[0])
    want = oracles.tape_encode(f, *oracle_args(ps), alpha)
    np.testing.assert_allclose(encode(Tensor(f), ps, P).data, want, atol=1e-6)


def test_batched_matches_single():
    ps = tape_params()
    f = np.random.default_rng(4).normal(size=(3, 6, 4, 4))
    out = encode(Tensor(f), ps, P).data
    for n in range(3):
        np.testing.assert_allclose(out[n], encode(Tensor(f[n]), ps, P).data, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(
    arrays(np.float64, (6, 3, 4), elements=st.floats(-1e3, 1e3)),
    st.floats(-3, 3),
    st.integers(0, 100),
)
def test_weights_bounded_and_residual_bound(f, alpha, seed):
    ps = tape_params(seed=seed)
    ps[f"{P}.alpha"].data[...] = alpha
    with T.precision(np.float64):
        p64 = ps.astype(np.float64)
        wc = channel_weights(Tensor(f), p64, P).data
        ws = spatial_weights(Tensor(f), p64, P).data
        out = encode(Tensor(f), p64, P).data
    alpha = abs(float(p64[f"{P}.alpha"].data[0]))  # float32-rounded value actually used
    assert np.all((wc >= 0) & (wc <= 1)) and np.all((ws >= 0) & (ws <= 1))
    assert np.max(np.abs(out - f)) <= alpha + 1e-9 * (1 + np.abs(f).max())


def test_weights_strictly_inside_unit_interval_for_moderate_inputs():
    ps = tape_params()
    f = Tensor(np.random.default_rng(5).normal(size=(6, 4, 4)))
    for w in (channel_weights(f, ps, P).data, spatial_weights(f, ps, P).data):
        assert np.all((w > 0) & (w < 1))


@pytest.mark.parametrize("multiplicative", [False, True])
def test_encode_gradcheck(multiplicative):
    cfg = TapeConfig(multiplicative=multiplicative)
    ps = tape_params(d=4, seed=7, cfg=cfg)
    f = np.random.default_rng(8).normal(size=(2, 4, 5, 5))
    w = np.random.default_rng(9).normal(size=f.shape)

    def loss(p):
        return T.sum_(T.mul(encode(Tensor(f), p, P, cfg), Tensor(w)))

    rep = gradcheck(loss, ps)
    assert rep.passed, rep.line()


def test_multiplicative_scales_with_features():
    cfg = TapeConfig(multiplicative=True)
    ps = zero_params()
    ps[f"{P}.alpha"].data[...] = 1.0
    f = np.random.default_rng(10).normal(size=(6, 3, 3)).astype(np.float32)
    np.testing.assert_allclose(encode(Tensor(f), ps, P, cfg).data, 1.25 * f, rtol=1e-6)


def test_sinusoidal_kind():
    cfg = TapeConfig(kind="sinusoidal")
    ps = zero_params(d=4)
    ps[f"{P}.alpha"].data[...] = 1.0
    f = np.zeros((4, 3, 5), dtype=np.float32)
    out = encode(Tensor(f), ps, P, cfg).data
    np.testing.assert_allclose(out, sinusoidal_map(4, 3, 5), atol=1e-7)
    assert np.all(np.abs(out) <= 1.0)


def test_config_validation():
    with pytest.raises(ValueError):
        TapeConfig(kernel=6)
    with pytest.raises(ValueError):
        TapeConfig(kind="learned")
    with pytest.raises(ValueError):
        init_tape(ParamStore(), P, 3, TapeConfig(ratio=4), np.random.default_rng(0))
