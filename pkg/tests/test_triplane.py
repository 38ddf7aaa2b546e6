import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from condcycle import autodiff as ad
from condcycle.autodiff import Tensor
from condcycle.triplane import RadianceDecoder, Triplane, f_mlp, sample_features


def test_constant_planes_give_constant_features():
    P = Triplane(Tensor(np.full((3, 4, 8, 8), 0.7)))
    pts = np.random.default_rng(0).uniform(-1.3, 1.3, (20, 3))
    np.testing.assert_allclose(sample_features(P, pts).data, 0.7, atol=1e-6)


def test_linear_ramp_center_value():
    ramp = np.linspace(-1, 1, 9)[None, :] + 2 * np.linspace(-1, 1, 9)[:, None]
    P = Triplane(Tensor(np.broadcast_to(ramp, (3, 1, 9, 9)).copy()))
    f = sample_features(P, np.zeros((1, 3))).data
    np.testing.assert_allclose(f, 0.0, atol=1e-6)


def test_grid_nodes_return_stored_features():
    rng = np.random.default_rng(3)
    planes = rng.normal(size=(3, 2, 5, 5)).astype(np.float32)
    P = Triplane(Tensor(planes))
    i, j, k = 1, 3, 4  # node indices along x, y, z
    node = np.linspace(-1, 1, 5)
    x = np.array([[node[i], node[j], node[k]]])
    f = sample_features(P, x).data[0]
    # plane XY: width<-x, height<-y; XZ: width<-x, height<-z; YZ: width<-y, height<-z
    expect = np.concatenate([planes[0][:, j, i], planes[1][:, k, i], planes[2][:, k, j]])
    np.testing.assert_array_equal(f, expect)


def test_piecewise_bilinear_exact_inside_texel():
    rng = np.random.default_rng(4)
    P = Triplane(Tensor(rng.normal(size=(3, 1, 3, 3))))
    # along x only, the XY plane feature is linear between texel centres
    a = sample_features(P, np.array([[0.1, 0.3, 0.2]])).data
    b = sample_features(P, np.array([[0.7, 0.3, 0.2]])).data
    m = sample_features(P, np.array([[0.4, 0.3, 0.2]])).data
    np.testing.assert_allclose(m[:, 0], 0.5 * (a[:, 0] + b[:, 0]), atol=1e-6)


def test_zero_planes_zero_bias_decoder():
    dec = RadianceDecoder(np.random.default_rng(0))
    P = Triplane(Tensor(np.zeros((3, 8, 16, 16))))
    rgb, sigma = f_mlp(P, np.random.default_rng(1).uniform(-1, 1, (10, 3)), dec)
    np.testing.assert_allclose(rgb.data, 0.5, atol=1e-7)
    np.testing.assert_allclose(sigma.data, np.log(2.0), atol=1e-6)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.1, 30))
def test_decoder_output_ranges(seed, scale):
    r = np.random.default_rng(seed)
    dec = RadianceDecoder(r)
    P = Triplane(Tensor(r.normal(size=(3, 8, 16, 16)) * scale))
    rgb, sigma = f_mlp(P, r.uniform(-2, 2, (50, 3)), dec)
    assert np.all(sigma.data >= 0) and np.all(np.isfinite(sigma.data))
    assert np.all((rgb.data >= 0) & (rgb.data <= 1))


def test_density_gradient_wrt_planes():
    for seed in range(10):
        r = np.random.default_rng(seed)
        dec = RadianceDecoder(r, channels=2, width=8)
        pts = r.uniform(-0.9, 0.9, (6, 3))

        def f(planes):
            rgb, sigma = dec(Triplane(planes), pts)
            return ad.sum_(sigma) + ad.sum_(rgb * rgb)

        # small stencil: a wider one can straddle a ReLU kink
        assert ad.finite_difference_check(f, r.normal(size=(3, 2, 4, 4)) * 0.5, eps=1e-5) < 1e-3


def test_triplane_shape_validated():
    with pytest.raises(ad.ShapeError):
        Triplane(Tensor(np.zeros((2, 8, 4, 4))))
