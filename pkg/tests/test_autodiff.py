import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from condcycle import autodiff as ad
from condcycle.autodiff import Tensor, finite_difference_check as fdc

SEEDS = range(10)


def leaf(x):
    return Tensor(np.asarray(x), requires_grad=True)


def grads_of(f, *xs):
    with ad.Tape():
        loss = f(*xs)
        ad.backward(loss)
    return [x.grad for x in xs]


# --- small worked cases -------------------------------------------------------------

def test_add_values():
    np.testing.assert_array_equal((Tensor([1.0, 2.0]) + Tensor([3.0, 4.0])).data, [4.0, 6.0])


def test_grid_sample_center_is_mean_of_corners():
    plane = Tensor(np.array([[[0.0, 1.0], [2.0, 3.0]]]))
    out = ad.grid_sample_bilinear(plane, Tensor(np.zeros((1, 2))))
    assert out.data[0, 0] == pytest.approx(1.5)


def test_sigmoid_slope_at_zero():
    (g,) = grads_of(lambda x: ad.sum_(ad.sigmoid(x)), leaf([0.0]))
    assert g[0] == pytest.approx(0.25)


def test_square_gradient():
    (g,) = grads_of(lambda x: ad.sum_(x * x), leaf([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(g, [2.0, 4.0, 6.0])


def test_mean_gradient():
    (g,) = grads_of(lambda x: ad.mean(x), leaf(np.arange(4.0)))
    np.testing.assert_allclose(g, [0.25] * 4)


def test_gradients_accumulate_into_leaves():
    x = leaf([1.0, -2.0])
    grads_of(lambda x: ad.sum_(x * 3.0), x)
    grads_of(lambda x: ad.sum_(x * 3.0), x)
    np.testing.assert_allclose(x.grad, [6.0, 6.0])


def test_non_scalar_loss_rejected():
    x = leaf([1.0, 2.0])
    with ad.Tape():
        with pytest.raises(ad.GradientError):
            ad.backward(x * 2.0)


def test_shape_error_names_op_and_shapes():
    with pytest.raises(ad.ShapeError) as info:
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    assert info.value.op == "matmul"
    assert (2, 3) in info.value.shapes


def test_default_dtype_is_float32():
    assert Tensor([1.0]).dtype == np.float32
    with ad.precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64


def test_grid_sample_clamps_outside():
    plane = Tensor(np.array([[[0.0, 1.0], [2.0, 3.0]]]))
    out = ad.grid_sample_bilinear(plane, Tensor(np.array([[5.0, -7.0], [1.0, -1.0]])))
    np.testing.assert_allclose(out.data[:, 0], [1.0, 1.0])


# --- finite-difference sweep over primitives ---------------------------------------

def _pos(rng, *shape):
    return rng.uniform(0.5, 1.5, shape)


PRIMITIVES = {
    "add": lambda x, r: ad.sum_((x + _pos(r, 3, 4)) ** 2),
    "sub": lambda x, r: ad.sum_((_pos(r, 3, 4) - x) ** 2),
    "mul": lambda x, r: ad.sum_(x * x * _pos(r, 3, 4)),
    "div": lambda x, r: ad.sum_(_pos(r, 3, 4) / (x * x + 1.0)),
    "matmul": lambda x, r: ad.sum_(ad.matmul(x, Tensor(r.normal(size=(4, 2)))) ** 2),
    "relu": lambda x, r: ad.sum_(ad.relu(x) * _pos(r, 3, 4)),
    "softplus": lambda x, r: ad.sum_(ad.softplus(x) ** 2),
    "sigmoid": lambda x, r: ad.sum_(ad.sigmoid(x) * _pos(r, 3, 4)),
    "tanh": lambda x, r: ad.sum_(ad.tanh(x) ** 2),
    "exp": lambda x, r: ad.sum_(ad.exp(x * 0.5)),
    "log": lambda x, r: ad.sum_(ad.log(x * x + 1.0)),
    "sqrt": lambda x, r: ad.sum_(ad.sqrt(x * x + 1.0)),
    "mean": lambda x, r: ad.mean(ad.mean(x * x, axis=1) * _pos(r, 3)),
    "sum_axis": lambda x, r: ad.sum_(ad.sum_(x, axis=0) ** 2),
    "broadcast": lambda x, r: ad.sum_(ad.broadcast_to(ad.reshape(x, (1, 3, 4)), (2, 3, 4)) ** 2),
    "reshape": lambda x, r: ad.sum_(ad.reshape(x, (4, 3)) * _pos(r, 4, 3)),
    "transpose": lambda x, r: ad.sum_(ad.transpose(x) * _pos(r, 4, 3)),
    "concat": lambda x, r: ad.sum_(ad.concat([x, x * 2.0], axis=1) ** 2),
    "stack": lambda x, r: ad.sum_(ad.stack([x, x * x], axis=0) * _pos(r, 2, 3, 4)),
    "slice": lambda x, r: ad.sum_(x[1:, ::2] ** 2),
    "take": lambda x, r: ad.sum_(ad.take(x, np.array([0, 2, 2, 1]), axis=1) ** 2),
    "pad_edge": lambda x, r: ad.sum_(ad.pad(x, ((1, 1), (2, 0)), mode="edge") ** 2),
    "l2_normalize": lambda x, r: ad.sum_(ad.l2_normalize(x, axis=1) * _pos(r, 3, 4)),
    "amax": lambda x, r: ad.sum_(ad.amax(x, axis=1) ** 2),
    "conv2d": lambda x, r: ad.sum_(ad.conv2d(ad.reshape(x, (1, 1, 3, 4)),
                                             Tensor(r.normal(size=(2, 1, 3, 3))), Tensor(r.normal(size=2)),
                                             stride=1, padding=1) ** 2),
    "conv2d_stride": lambda x, r: ad.sum_(ad.conv2d(ad.reshape(x, (1, 2, 2, 3)),
                                                    Tensor(r.normal(size=(3, 2, 3, 3))), None,
                                                    stride=2, padding=1) ** 2),
    "grid_sample": lambda x, r: ad.sum_(ad.grid_sample_bilinear(
        ad.reshape(x, (1, 3, 4)), Tensor(r.uniform(-0.95, 0.95, (6, 2)))) ** 2),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    for seed in SEEDS:
        r = np.random.default_rng(seed)
        x = r.normal(size=(3, 4))
        if name in ("relu", "amax"):
            x = x + np.sign(x) * 0.05  # keep clear of kinks and ties
        err = fdc(lambda t: PRIMITIVES[name](t, np.random.default_rng(seed + 100)), x)
        assert err < 1e-3, (name, seed, err)


def test_grid_sample_uv_gradient():
    for seed in SEEDS:
        r = np.random.default_rng(seed)
        plane = Tensor(r.normal(size=(2, 5, 5)))
        # texel-interior points: the bilinear map is smooth only between texel centres
        texel = r.integers(0, 4, (4, 2)) + r.uniform(0.1, 0.9, (4, 2))
        w = Tensor(r.normal(size=(4, 2)))
        err = fdc(lambda uv: ad.sum_(ad.grid_sample_bilinear(plane, uv) * w), texel / 2.0 - 1.0)
        assert err < 1e-3


def test_fd_of_sum_is_exact():
    x = np.random.default_rng(0).normal(size=8)
    assert fdc(lambda t: ad.sum_(t), x) < 1e-6


def test_fd_of_sum_of_squares():
    x = np.random.default_rng(0).normal(size=8)
    assert fdc(lambda t: ad.sum_(t * t), x) < 1e-3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_fd_reports_nan_as_failure():
    assert fdc(lambda t: ad.sum_(ad.log(t)), np.array([-1.0, 2.0])) == float("inf")


# --- properties ----------------------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 10_000))
def test_accumulation_is_linear(a, b, seed):
    r = np.random.default_rng(seed)
    x0 = r.normal(size=5)
    w = Tensor(r.normal(size=5))
    l1 = lambda x: ad.sum_(ad.tanh(x) * w)  # noqa: E731
    l2 = lambda x: ad.sum_(x * x * x)  # noqa: E731
    with ad.precision(np.float64):
        (g1,) = grads_of(l1, leaf(x0))
        (g2,) = grads_of(l2, leaf(x0))
        (g,) = grads_of(lambda x: l1(x) * a + l2(x) * b, leaf(x0))
    np.testing.assert_allclose(g, a * g1 + b * g2, atol=1e-5)


def test_forward_is_deterministic():
    def run():
        r = np.random.default_rng(7)
        x = Tensor(r.normal(size=(1, 2, 8, 8)))
        w = Tensor(r.normal(size=(3, 2, 3, 3)))
        return ad.sigmoid(ad.conv2d(x, w, padding=1)).data

    assert run().tobytes() == run().tobytes()


def test_tape_nodes_are_topologically_ordered():
    x = leaf(np.ones(3))
    with ad.Tape() as tape:
        y = ad.exp(x) * x + x
        ad.sum_(y)
    for nid, node in enumerate(tape.nodes):
        assert all(src is None or src < nid for src in node.inputs)


# --- split backward ------------------------------------------------------------------

def test_cut_at_identity_caches_ones():
    x = leaf([1.0, 2.0, 3.0])
    with ad.Tape():
        y = x * 1.0
        loss = ad.sum_(y)
        cut = ad.backward_to_cut(loss, ad.CutSet([y]))
    np.testing.assert_array_equal(cut.cached_grads[0], [1.0, 1.0, 1.0])


def test_cut_two_x_squared():
    x = leaf([1.0])
    with ad.Tape():
        y = x * 2.0
        loss = ad.sum_(y * y)
        cut = ad.backward_to_cut(loss, ad.CutSet([y]))
        np.testing.assert_allclose(cut.cached_grads[0], [4.0])
        grads = ad.resume_backward(cut)
    np.testing.assert_allclose(grads[x], [8.0])


def test_unreachable_cut_rejected():
    x = leaf([1.0])
    with ad.Tape():
        unrelated = x * 5.0
        y = x * 2.0
        z = unrelated * 1.0  # recorded later but not feeding the loss
        loss = ad.sum_(y * y)
        with pytest.raises(ad.GradientError):
            ad.backward_to_cut(loss, ad.CutSet([z]))


def test_resume_without_cache_rejected():
    with pytest.raises(ad.GradientError):
        ad.resume_backward(ad.CutSet([Tensor([1.0])]))


def _random_graph(seed, x, w1, w2):
    r = np.random.default_rng(seed)
    h = ad.tanh(ad.matmul(x, w1))
    side = ad.sum_(h * h) * float(r.uniform(0.1, 1))  # branch that bypasses the cut
    cut = ad.sigmoid(h * float(r.uniform(0.5, 2)))
    g = ad.relu(ad.matmul(cut, w2) + 0.1)
    loss = ad.mean(g * g) + side + ad.sum_(h) * 0.01
    return cut, loss


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_two_phase_matches_single_phase(seed):
    r = np.random.default_rng(seed)
    xs = r.normal(size=(4, 3))
    ws1, ws2 = r.normal(size=(3, 5)), r.normal(size=(5, 2))
    results = []
    for split in (False, True):
        x, w1, w2 = leaf(xs), leaf(ws1), leaf(ws2)
        with ad.Tape():
            cut, loss = _random_graph(seed, x, w1, w2)
            if split:
                ad.resume_backward(ad.backward_to_cut(loss, ad.CutSet([cut])))
            else:
                ad.backward(loss)
        results.append([x.grad, w1.grad, w2.grad])
    for a, b in zip(*results):
        assert np.max(np.abs(a - b)) <= 1e-6


def test_two_phase_lowers_peak_bytes():
    r = np.random.default_rng(0)
    peaks = {}
    for split in (False, True):
        x = leaf(r.normal(size=(64, 32)))
        w = leaf(r.normal(size=(32, 32)) * 0.2)
        with ad.Tape() as tape:
            h = x
            for _ in range(4):
                h = ad.tanh(ad.matmul(h, w))
            cut = h
            for _ in range(4):
                h = ad.tanh(ad.matmul(h, w))
            loss = ad.mean(h * h)
            if split:
                ad.resume_backward(ad.backward_to_cut(loss, ad.CutSet([cut])))
            else:
                ad.backward(loss)
        peaks[split] = tape.peak_bytes
    assert peaks[True] < peaks[False]
