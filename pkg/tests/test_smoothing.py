import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from quantsmooth.errors import DimensionError, NumericError
from quantsmooth.rotation import apply_rotation, random_rotation
from quantsmooth.smoothing import (
    SCALE_CLIP,
    SmoothScale,
    apply_dual_smooth,
    compute_smooth_scale,
    fuse_offline,
    smooth_scale_from_max,
    transform_activations,
)
from quantsmooth.tensor import gen_heavy_tailed, make_rng


def rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def test_scale_examples():
    x_rot = np.array([[9.0, 1.0, 0.0], [-3.0, 2.0, 0.0]])
    w_rot = np.array([[4.0, 1.0, 1.0], [-1.0, 0.5, 2.0]])
    sc = compute_smooth_scale(x_rot, w_rot, 0.5)
    assert sc.c_hat[0] == pytest.approx(1.5, abs=1e-15)
    assert sc.c_hat[2] == 1.0  # dead activation channel
    one = compute_smooth_scale(x_rot, w_rot, 1.0)
    assert one.c_hat[:2].tolist() == [9.0, 2.0]
    assert compute_smooth_scale(np.zeros((2, 3)), w_rot).c_hat.tolist() == [1.0, 1.0, 1.0]


def test_scale_clipping_and_validation():
    sc = smooth_scale_from_max(np.array([1e12, 1e-12]), np.array([1.0, 1.0]), 1.0)
    assert sc.c_hat.tolist() == list(SCALE_CLIP[::-1])
    raw = smooth_scale_from_max(np.array([1e12]), np.array([1.0]), 1.0, clip=False)
    assert raw.c_hat[0] == 1e12
    with pytest.raises(NumericError):
        SmoothScale(np.array([1.0, -1.0]))
    with pytest.raises(ValueError):
        SmoothScale(np.ones(2), alpha=1.5)
    with pytest.raises(DimensionError):
        compute_smooth_scale(np.ones((2, 3)), np.ones((2, 4)))


@pytest.mark.parametrize("order", ["rot-scale", "scale-rot"])
def test_dual_smooth_product_identity(order):
    for seed in range(100):
        rng = make_rng(seed, 6)
        d = [16, 64, 256][seed % 3]
        x, w = rng.standard_normal((10, d)), rng.standard_normal((5, d))
        c = SmoothScale(np.exp(rng.uniform(np.log(1e-3), np.log(1e3), d)))
        xp, wp = apply_dual_smooth(x, w, random_rotation(d, seed), c, order)
        assert rel(xp @ wp.T, x @ w.T) < 1e-9


def test_unit_scale_is_plain_rotation():
    rng = make_rng(1)
    x, w = rng.standard_normal((4, 32)), rng.standard_normal((3, 32))
    rot = random_rotation(32, 5)
    xp, wp = apply_dual_smooth(x, w, rot, SmoothScale.ones(32))
    assert np.array_equal(xp, apply_rotation(x, rot)) and np.array_equal(wp, apply_rotation(w, rot))
    assert np.array_equal(fuse_offline(w, None, None), w)


@given(st.integers(0, 10**6), st.sampled_from([16, 64, 128]))
@settings(max_examples=40, deadline=None)
def test_balance_property_at_half(seed, d):
    rng = make_rng(seed)
    x = gen_heavy_tailed(rng, (48, d), rng.choice(d, 4, replace=False), 20.0)
    w = rng.standard_normal((24, d))
    rot = random_rotation(d, seed)
    sc = compute_smooth_scale(apply_rotation(x, rot), apply_rotation(w, rot), 0.5)
    xp, wp = apply_dual_smooth(x, w, rot, sc)
    ratio = np.abs(xp).max(axis=0) / np.abs(wp).max(axis=0)
    assert np.max(np.abs(ratio - 1.0)) < 1e-9


def test_fused_weights_match_dual_smooth_bytes():
    rng = make_rng(8)
    x, w = rng.standard_normal((6, 64)), rng.standard_normal((10, 64))
    rot = random_rotation(64, 8)
    sc = compute_smooth_scale(apply_rotation(x, rot), apply_rotation(w, rot))
    _, wp = apply_dual_smooth(x, w, rot, sc)
    assert fuse_offline(w, rot, sc).tobytes() == wp.tobytes()
    first = transform_activations(x, rot, sc) @ fuse_offline(w, rot, sc).T
    for _ in range(100):
        assert np.array_equal(transform_activations(x, rot, sc) @ fuse_offline(w, rot, sc).T, first)


def test_transform_errors():
    with pytest.raises(DimensionError):
        transform_activations(np.ones((2, 8)), random_rotation(16, 0), None)
    with pytest.raises(DimensionError):
        fuse_offline(np.ones((2, 8)), None, SmoothScale.ones(4))
    with pytest.raises(ValueError):
        transform_activations(np.ones((2, 8)), None, None, order="sideways")


def test_scaled_copy_clips():
    sc = SmoothScale(np.array([1.0, 5e3]))
    assert sc.scaled(np.array([2.0, 4.0])).c_hat.tolist() == [2.0, 1e4]
