import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from avcmr.errors import DeterminismError, DimensionError, PoisonedGradientError
from avcmr.numeric import (
    Activation,
    DenseLayer,
    Optimizer,
    dense_backward,
    dense_forward,
    finite_diff_check,
    l2_normalize,
    l2_normalize_rows,
    l2_normalize_rows_backward,
)


def loop_forward(W, b, x, relu):
    """Scalar triple-loop reference for a dense layer."""
    out = np.zeros((x.shape[0], W.shape[0]))
    for n in range(x.shape[0]):
        for o in range(W.shape[0]):
            acc = b[o]
            for i in range(W.shape[1]):
                acc += x[n, i] * W[o, i]
            out[n, o] = max(acc, 0.0) if relu else acc
    return out


class Params:
    """Minimal object exposing ``parameters()`` for the gradient checker."""

    def __init__(self, *arrays):
        self._p = [np.asarray(a, dtype=np.float64) for a in arrays]

    def parameters(self):
        return self._p


def test_dense_forward_identity():
    layer = DenseLayer(np.eye(2), np.zeros(2), Activation.IDENTITY)
    np.testing.assert_array_equal(dense_forward(layer, [[3.0, 4.0]]), [[3.0, 4.0]])


def test_dense_forward_relu_clamps():
    layer = DenseLayer([[1.0, 1.0]], [-5.0], Activation.RELU)
    np.testing.assert_array_equal(dense_forward(layer, [[2.0, 2.0]]), [[0.0]])


@pytest.mark.parametrize("shape", [(1, 1, 1), (3, 5, 2), (7, 64, 64), (64, 13, 40)])
@pytest.mark.parametrize("act", list(Activation))
def test_dense_forward_matches_loop(shape, act):
    batch, n_in, n_out = shape
    rng = np.random.default_rng(sum(shape))
    layer = DenseLayer(rng.normal(size=(n_out, n_in)), rng.normal(size=n_out), act)
    x = rng.normal(size=(batch, n_in))
    expected = loop_forward(layer.weight, layer.bias, x, act is Activation.RELU)
    np.testing.assert_allclose(dense_forward(layer, x), expected, rtol=0, atol=1e-12)


def test_dense_forward_shape_error_reports_both_shapes():
    layer = DenseLayer(np.ones((3, 4)), np.zeros(3))
    with pytest.raises(DimensionError, match=r"\(2, 5\).*\(3, 4\)"):
        dense_forward(layer, np.ones((2, 5)))


def test_dense_backward_linear_weight_grad():
    layer = DenseLayer([[0.5, -1.0]], [0.0], Activation.IDENTITY)
    (gw, gb), gx = dense_backward(layer, [[1.0, 2.0]], [[1.0]])
    np.testing.assert_array_equal(gw, [[1.0, 2.0]])
    np.testing.assert_array_equal(gb, [1.0])
    np.testing.assert_array_equal(gx, [[0.5, -1.0]])


def test_dense_backward_dead_relu():
    layer = DenseLayer([[1.0, 1.0], [2.0, -1.0]], [-10.0, -10.0], Activation.RELU)
    (gw, gb), gx = dense_backward(layer, [[1.0, 1.0]], [[3.0, -2.0]])
    assert np.all(gx == 0) and np.all(gw == 0) and np.all(gb == 0)


def test_dense_backward_shape_error():
    layer = DenseLayer(np.ones((3, 4)), np.zeros(3))
    with pytest.raises(DimensionError):
        dense_backward(layer, np.ones((2, 4)), np.ones((2, 2)))


@pytest.mark.parametrize("seed", range(4))
def test_dense_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    layer = DenseLayer(rng.normal(size=(4, 3)), rng.normal(size=4), Activation.RELU)
    x = rng.normal(size=(5, 3))
    target = rng.normal(size=(5, 4))

    class Net:
        def parameters(self):
            return [layer.weight, layer.bias, x]

    def loss_fn(net, batch):
        out = dense_forward(layer, x)
        (gw, gb), gx = dense_backward(layer, x, out - target)
        return 0.5 * float(np.sum((out - target) ** 2)), [gw, gb, gx]

    assert finite_diff_check(Net(), loss_fn, None, h=1e-5) < 1e-5


def test_finite_diff_quadratic():
    p = Params([3.0])

    def loss_fn(net, _):
        t = net.parameters()[0]
        return float(t[0] ** 2), [2.0 * t]

    assert finite_diff_check(p, loss_fn, None, h=1e-4) < 1e-7
    # numeric derivative itself
    h = 1e-4
    assert abs(((3 + h) ** 2 - (3 - h) ** 2) / (2 * h) - 6.0) < 1e-7


def test_finite_diff_zero_gradient_uses_floor():
    p = Params([0.0, 0.0])

    def loss_fn(net, _):
        t = net.parameters()[0]
        return float(np.sum(t**2)), [2.0 * t]

    err = finite_diff_check(p, loss_fn, None, h=1e-4)
    assert np.isfinite(err) and err < 1e-4


def test_finite_diff_detects_nondeterminism():
    p = Params([1.0])
    calls = iter(range(100))

    def loss_fn(net, _):
        return float(next(calls)), [np.zeros(1)]

    with pytest.raises(DeterminismError):
        finite_diff_check(p, loss_fn, None)


def test_finite_diff_restores_parameters():
    p = Params(np.arange(6.0).reshape(2, 3))
    before = p.parameters()[0].copy()

    def loss_fn(net, _):
        t = net.parameters()[0]
        return float(np.sum(np.sin(t))), [np.cos(t)]

    finite_diff_check(p, loss_fn, None)
    np.testing.assert_array_equal(p.parameters()[0], before)


def test_sgd_step():
    theta = np.array([1.0])
    Optimizer("sgd", 0.1).step([theta], [np.array([2.0])])
    assert theta[0] == pytest.approx(0.8, abs=1e-15)


@pytest.mark.parametrize("g", [1e-6, -3.0, 250.0])
def test_adam_first_step_is_lr_sized(g):
    theta = np.array([0.5])
    Optimizer("adam", 1e-4).step([theta], [np.array([g])])
    assert abs(abs(theta[0] - 0.5) - 1e-4) < 1e-4 * 2e-2
    assert np.sign(0.5 - theta[0]) == np.sign(g)


def test_adam_descends_quadratic():
    theta = np.array([1.0])
    opt = Optimizer("adam", 1e-2)
    # independent recurrence
    m = v = 0.0
    ref = 1.0
    for t in range(1, 101):
        opt.step([theta], [2.0 * theta.copy()])
        g = 2.0 * ref
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 1e-2 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert abs(theta[0]) < 1.0
    assert theta[0] == pytest.approx(ref, abs=1e-12)
    assert opt.step_count == 100


def test_zero_gradient_leaves_params():
    for kind in ("sgd", "adam"):
        theta = np.array([0.3, -2.0])
        before = theta.copy()
        Optimizer(kind, 0.1).step([theta], [np.zeros(2)])
        np.testing.assert_array_equal(theta, before)


def test_poisoned_gradient_names_tensor():
    with pytest.raises(PoisonedGradientError, match="visual.layer2.bias"):
        Optimizer().step([np.zeros(2)], [np.array([0.0, np.nan])], ["visual.layer2.bias"])


def test_l2_normalize_examples():
    v, deg = l2_normalize([3.0, 4.0])
    np.testing.assert_allclose(v, [0.6, 0.8], atol=1e-15)
    assert not deg
    u, _ = l2_normalize([0.0, 1.0])
    np.testing.assert_array_equal(u, [0.0, 1.0])
    z, deg = l2_normalize(np.zeros(3))
    np.testing.assert_array_equal(z, np.zeros(3))
    assert deg


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 16), elements=st.floats(-1e6, 1e6)))
def test_l2_normalize_unit_and_idempotent(v):
    u, deg = l2_normalize(v)
    if deg:
        np.testing.assert_array_equal(u, v)
        return
    assert abs(np.linalg.norm(u) - 1.0) <= 1e-12
    u2, _ = l2_normalize(u)
    np.testing.assert_allclose(u2, u, atol=1e-15)


def test_l2_normalize_rows_backward_finite_difference():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 3))
    up = rng.normal(size=(4, 3))
    u, deg, norms = l2_normalize_rows(x)
    g = l2_normalize_rows_backward(u, norms, deg, up)
    h = 1e-6
    num = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        num[idx] = (np.sum(l2_normalize_rows(xp)[0] * up) - np.sum(l2_normalize_rows(xm)[0] * up)) / (2 * h)
    np.testing.assert_allclose(g, num, atol=1e-8)
