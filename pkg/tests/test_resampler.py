import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import store_grad_error
from mrunits import engine as E
from mrunits.resampler import (DEFAULT_W_RES, ResolutionLadder, Resampler, derive_ratios,
                               level_features)


def _resampler(ladder=(20, 40, 80), in_dim=4, width=4, w_res=DEFAULT_W_RES, dtype=np.float64,
               seed=0):
    store = E.ParamStore()
    r = Resampler(store, in_dim, width, ResolutionLadder(ladder), w_res,
                  rng=np.random.default_rng(seed), dtype=dtype)
    return store, r


def test_derive_ratios_examples():
    assert derive_ratios(ResolutionLadder((20, 40, 80))) == ([2, 2], [2, 2])
    assert derive_ratios(ResolutionLadder((20,))) == ([], [])
    assert derive_ratios(ResolutionLadder((20, 60))) == ([3], [3])
    down, up = derive_ratios(ResolutionLadder((10, 20, 80)))
    assert down == [2, 4] and up == [4, 2]


def test_ladder_validation():
    with pytest.raises(ValueError, match="30"):
        ResolutionLadder((20, 30))
    with pytest.raises(ValueError):
        ResolutionLadder((40, 20))
    with pytest.raises(ValueError):
        ResolutionLadder(())
    assert ResolutionLadder.parse("20,40,80").resolutions_ms == (20.0, 40.0, 80.0)


def test_tokens_per_second():
    assert ResolutionLadder((20,)).tokens_per_second() == 50.0
    assert ResolutionLadder((20, 40)).tokens_per_second() == 75.0
    assert ResolutionLadder((20, 40, 80)).tokens_per_second() == 87.5


def test_parameter_names():
    store, _ = _resampler()
    names = set(store.names())
    assert {"transfer.weight", "transfer.bias", "down.0.weight", "down.1.bias",
            "up.0.weight", "up.1.bias"} <= names


def test_transfer_preserves_frames_and_zero_map(rng):
    store, r = _resampler(in_dim=6, width=5)
    assert r.transfer_encode(rng.normal(size=(6, 50))).shape == (5, 50)
    store["transfer.weight"].data[:] = 0
    store["transfer.bias"].data[:] = 0
    assert not np.any(r.transfer_encode(rng.normal(size=(6, 9))).data)
    with pytest.raises(ValueError):
        r.transfer_encode(rng.normal(size=(3, 9)))


def test_single_level_is_identity(rng):
    _, r = _resampler(ladder=(20,))
    x0 = rng.normal(size=(4, 13))
    mrf = r.forward(x0)
    np.testing.assert_array_equal(mrf.up_path[0].data, x0)


def test_residual_weight_arithmetic():
    store, r = _resampler(width=3)
    for n in store.names("up."):
        store[n].data[:] = 0
    x0 = np.ones((3, 8))
    mrf = r.forward(x0)
    # up output is zero, so the finest level is w_res times the skip
    np.testing.assert_allclose(mrf.up_path[0].data, math.sqrt(0.4), atol=1e-12)
    assert abs(mrf.up_path[0].data[0, 0] - 0.632456) < 1e-6


def test_level_lookup(rng):
    _, r = _resampler()
    mrf = r(rng.normal(size=(4, 200)))
    assert [x.shape[1] for x in mrf.up_path] == [200, 100, 50]
    assert [x.shape[1] for x in mrf.down_path] == [200, 100, 50]
    assert level_features(mrf, 20) is mrf.up_path[0]
    assert level_features(mrf, 80) is mrf.down_path[2]
    with pytest.raises(KeyError):
        level_features(mrf, 30)


@given(frames=st.integers(1, 64))
@settings(max_examples=64, deadline=None)
def test_length_law(frames):
    _, r = _resampler(width=2, in_dim=2)
    mrf = r(np.ones((2, frames)))
    expect = [frames, math.ceil(frames / 2), math.ceil(frames / 4)]
    assert [x.shape[1] for x in mrf.down_path] == expect
    assert [x.shape[1] for x in mrf.up_path] == expect


def _averaging_kernels(store, r):
    width = r.width
    for i, ratio in enumerate(r.down_ratios):
        w = np.zeros((width, width, ratio))
        for c in range(width):
            w[c, c, :] = 1.0 / ratio
        store[f"down.{i}.weight"].data = w
        store[f"down.{i}.bias"].data[:] = 0
    for j, ratio in enumerate(r.up_ratios):
        w = np.zeros((width, width, ratio))
        for c in range(width):
            w[c, c, :] = 1.0
        store[f"up.{j}.weight"].data = w
        store[f"up.{j}.bias"].data[:] = 0


@pytest.mark.parametrize("frames", [8, 11, 13])
def test_constant_fixed_point_half_weight(frames):
    # averaging down, duplicating up: UP(c) + c = 2c, so w_res = 1/2 keeps c
    store, r = _resampler(ladder=(20, 40, 80, 160), width=3, w_res=0.5)
    _averaging_kernels(store, r)
    mrf = r.forward(np.full((3, frames), 1.7))
    for x in mrf.down_path + mrf.up_path:
        np.testing.assert_allclose(x.data, 1.7, rtol=0, atol=1e-12)


def test_constant_unit_weight_accumulates():
    # with w_res = 1 each up step adds one more copy of the constant
    store, r = _resampler(ladder=(20, 40, 80, 160), width=2, w_res=1.0)
    _averaging_kernels(store, r)
    mrf = r.forward(np.full((2, 16), 0.5))
    t = r.stages
    for i, x in enumerate(mrf.up_path):
        np.testing.assert_allclose(x.data, (t - i + 1) * 0.5, atol=1e-12)


def test_transfer_gradient(rng):
    store, r = _resampler(in_dim=4, width=4)
    target = rng.normal(size=(4, 9))
    err = store_grad_error(store, lambda x: (r.transfer_encode(x["s"]) * target).sum(),
                           names=["transfer.weight", "transfer.bias"],
                           extra={"s": rng.normal(size=(4, 9))})
    assert err < 1e-6


def test_full_resampler_gradient(rng):
    store, r = _resampler(in_dim=4, width=4)
    targets = [rng.normal(size=(4, n)) for n in (11, 6, 3)]

    def loss(x):
        mrf = r(x["s"])
        total = None
        for level, tgt in zip(mrf.up_path, targets):
            term = (level * level * tgt).sum()
            total = term if total is None else total + term
        return total

    assert store_grad_error(store, loss, extra={"s": rng.normal(size=(4, 11))}) < 1e-6


def test_symmetry_is_checked():
    _, r = _resampler(ladder=(10, 20, 80))
    assert r.down_ratios == list(reversed(r.up_ratios))
