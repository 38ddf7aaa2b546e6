import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from condcycle import autodiff as ad
from condcycle.autodiff import Tensor
from condcycle.camera import look_at
from condcycle.conditions import (EDGE_SHARPNESS, EDGE_THRESHOLD, SKETCH_NET, ConditionMap, extract, f_canny,
                                  f_cond, f_d2n, f_norm, f_sketch, resize, sobel_magnitude)
from condcycle.render import RenderOutput


def test_constant_image_edge_value():
    # zero gradient => sigmoid(k * (sqrt(eps) - t)) everywhere
    out = f_canny(np.full((16, 16, 3), 0.4)).data.data
    expect = 1 / (1 + np.exp(-EDGE_SHARPNESS * (np.sqrt(1e-6) - EDGE_THRESHOLD)))
    np.testing.assert_allclose(out, expect, atol=1e-6)
    assert expect == pytest.approx(0.01834, abs=1e-4)


def test_sobel_unit_step_reads_one():
    g = np.zeros((9, 9))
    g[:, 5:] = 1.0
    m = sobel_magnitude(Tensor(g)).data
    assert m[4, 4] == pytest.approx(1.0, abs=1e-5) and m[4, 5] == pytest.approx(1.0, abs=1e-5)
    assert m[4, 1] == pytest.approx(1e-3, abs=1e-6)


def test_edge_map_peaks_on_boundary():
    img = np.zeros((32, 32, 3))
    img[8:24, 8:24] = 1.0
    e = f_canny(img).data.data
    assert e[16, 8] > 0.9 and e[16, 16] < 0.05 and e[2, 2] < 0.05
    assert e.shape == (32, 32) and np.all((e >= 0) & (e <= 1))


def test_sketch_is_deterministic_and_bounded():
    r = np.random.default_rng(0)
    img = r.uniform(size=(16, 16, 3))
    a = f_sketch(img).data.data
    b = f_sketch(img.copy()).data.data
    assert a.tobytes() == b.tobytes() and a.shape == (16, 16)
    assert np.all((a > 0) & (a < 1))
    assert len(SKETCH_NET.checksum()) == 64


def test_f_cond_dispatch():
    img = np.random.default_rng(1).uniform(size=(8, 8, 3))
    assert f_cond("edge", img).kind == "edge" and f_cond("sketch", img).kind == "sketch"
    with pytest.raises(ValueError):
        f_cond("depth", img)
    with pytest.raises(ValueError):
        ConditionMap("bogus", Tensor(np.zeros((2, 2))))


def test_f_norm_worked_example():
    d = np.array([[2.0, 4.0], [3.0, 9.0]])
    m = np.array([[True, True], [True, False]])
    out = f_norm(d, m).data.data
    np.testing.assert_allclose(out, [[0.0, 1.0], [0.5, 1.0]], atol=1e-7)


def test_f_norm_constant_and_empty():
    np.testing.assert_array_equal(f_norm(np.full((3, 3), 2.5), np.ones((3, 3), bool)).data.data, 0.0)
    with pytest.raises(ValueError):
        f_norm(np.ones((3, 3)), np.zeros((3, 3), bool))
    with pytest.raises(ad.ShapeError):
        f_norm(np.ones((3, 3)), np.ones((2, 3), bool))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), a=st.floats(0.01, 100), b=st.floats(-50, 50))
def test_f_norm_affine_invariance(seed, a, b):
    r = np.random.default_rng(seed)
    d = r.uniform(1.0, 4.0, (8, 8))
    m = r.uniform(size=(8, 8)) > 0.3
    m[0, 0] = m[0, 1] = True
    d[0, 0], d[0, 1] = 1.0, 4.0
    with ad.precision(np.float64):
        x = f_norm(d, m).data.data
        y = f_norm(a * d + b, m).data.data
    np.testing.assert_allclose(x, y, atol=1e-7)


def _plane_depth(pose, n_cam, offset):
    """z-depth of the plane n.p = -offset seen from the camera."""
    h, w = pose.height, pose.width
    xn = (np.arange(w) + 0.5 - 0.5 * w) / pose.focal
    yn = -(np.arange(h) + 0.5 - 0.5 * h) / pose.focal
    X, Y = np.meshgrid(xn, yn)
    # ray p = t * (X, Y, -1); z-depth = t
    return -offset / (n_cam[0] * X + n_cam[1] * Y - n_cam[2])


@pytest.mark.parametrize("n", [(0, 0, 1), (0.3, 0.1, 0.95), (-0.4, 0.5, 0.77)])
def test_d2n_recovers_plane_normal(n):
    n = np.asarray(n, float)
    n /= np.linalg.norm(n)
    pose = look_at((3.0, 0.0, 0.0), np.radians(40), 24, 24)
    with ad.precision(np.float64):
        d = _plane_depth(pose, n, 3.0)
        out = f_d2n(d, pose).data.data
    np.testing.assert_allclose(out, np.broadcast_to(n, out.shape), atol=1e-6)


def test_d2n_unit_length():
    pose = look_at((3.0, 0.0, 0.0), np.radians(40), 16, 16)
    d = 3.0 + np.random.default_rng(0).normal(size=(16, 16)) * 0.1
    n = f_d2n(d, pose).data.data
    np.testing.assert_allclose(np.linalg.norm(n, axis=-1), 1.0, atol=1e-5)


def test_extract_depth_and_empty_mask():
    pose = look_at((3.0, 0.0, 0.0), np.radians(40), 4, 4)
    depth = Tensor(np.linspace(2, 3, 16).reshape(4, 4))
    alpha = Tensor(np.zeros((4, 4)))
    out = extract("depth", RenderOutput(Tensor(np.zeros((4, 4, 3))), depth, alpha))
    np.testing.assert_array_equal(out.data.data, 1.0)
    assert not out.mask.any()
    alpha = Tensor(np.ones((4, 4)))
    out = extract("depth", RenderOutput(Tensor(np.zeros((4, 4, 3))), depth, alpha))
    assert out.data.data.min() == 0 and out.data.data.max() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        extract("normal", RenderOutput(Tensor(np.zeros((4, 4, 3))), depth, alpha))
    assert extract("normal", RenderOutput(None, depth, alpha), pose).data.shape == (4, 4, 3)


def test_resize_round_trip():
    x = np.random.default_rng(2).uniform(size=(4, 4))
    c = ConditionMap("edge", Tensor(x))
    up = resize(c, 16)
    assert up.data.shape == (16, 16)
    np.testing.assert_allclose(resize(up, 4).data.data, x, atol=1e-6)
    with pytest.raises(ValueError):
        resize(c, 10)


def test_resize_normals_stay_unit_and_mask_follows():
    n = np.random.default_rng(3).normal(size=(8, 8, 3))
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    m = np.zeros((8, 8), bool)
    m[:4, :4] = True
    down = resize(ConditionMap("normal", Tensor(n), m), 4)
    np.testing.assert_allclose(np.linalg.norm(down.data.data, axis=-1), 1.0, atol=1e-5)
    assert down.mask.sum() == 4 and down.mask[:2, :2].all()
    up = resize(ConditionMap("normal", Tensor(n), m), 16)
    assert up.mask.sum() == 64


# -- gradients, 10 seeds each ------------------------------------------------------

def _seeds():
    return range(10)


def test_canny_gradient():
    for s in _seeds():
        r = np.random.default_rng(s)
        w = r.normal(size=(8, 8))
        f = lambda img: ad.sum_(f_canny(img).data * w)  # noqa: E731
        assert ad.finite_difference_check(f, r.uniform(size=(8, 8, 3)), eps=1e-5) < 1e-3


def test_sketch_gradient():
    for s in _seeds():
        r = np.random.default_rng(s)
        w = r.normal(size=(8, 8))
        f = lambda img: ad.sum_(f_sketch(img).data * w)  # noqa: E731
        assert ad.finite_difference_check(f, r.uniform(size=(8, 8, 3)), eps=1e-5) < 1e-3


def test_d2n_gradient():
    pose = look_at((3.0, 0.0, 0.0), np.radians(40), 6, 6)
    for s in _seeds():
        r = np.random.default_rng(s)
        w = r.normal(size=(6, 6, 3))
        f = lambda d: ad.sum_(f_d2n(d, pose).data * w)  # noqa: E731
        assert ad.finite_difference_check(f, 3.0 + 0.2 * r.normal(size=(6, 6)), eps=1e-5) < 1e-3


def test_f_norm_gradient():
    for s in _seeds():
        r = np.random.default_rng(s)
        m = r.uniform(size=(6, 6)) > 0.2
        w = r.normal(size=(6, 6))
        f = lambda d: ad.sum_(f_norm(d, m).data * w)  # noqa: E731
        assert ad.finite_difference_check(f, r.uniform(1, 4, (6, 6)), eps=1e-5) < 1e-3
