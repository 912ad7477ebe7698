import math

import numpy as np
import pytest

from avcmr.errors import DimensionError, LabelError
from avcmr.model import (
    ModelPair,
    ProjectionNetwork,
    label_loss,
    load_checkpoint,
    project,
    save_checkpoint,
)
from avcmr.numeric import Activation, DenseLayer, dense_forward, finite_diff_check


def test_identity_network_passes_input_through():
    net = ProjectionNetwork([DenseLayer(np.eye(3), np.zeros(3), Activation.IDENTITY)])
    x = np.array([[1.5, -2.0, 0.25]])
    np.testing.assert_array_equal(project(net, x), x)


def test_ave_preset_shapes():
    # 400-sample batch of 128-d audio into 15 classes
    net = ProjectionNetwork.build(128, 64, 15, np.random.default_rng(0))
    out = project(net, np.random.default_rng(1).normal(size=(400, 128)))
    assert out.shape == (400, 15)
    assert len(net.layers) == 4
    assert [l.activation for l in net.layers] == [Activation.RELU] * 3 + [Activation.IDENTITY]


def test_project_is_composition_of_dense_forward():
    rng = np.random.default_rng(5)
    net = ProjectionNetwork.build(6, 8, 4, rng)
    x = rng.normal(size=(10, 6))
    h = x
    for layer in net.layers:
        h = dense_forward(layer, h)
    np.testing.assert_array_equal(project(net, x), h)
    np.testing.assert_array_equal(project(net, x), project(net, x))


def test_project_dimension_error_names_modality():
    net = ProjectionNetwork.build(6, 8, 4, np.random.default_rng(0), modality="visual")
    with pytest.raises(DimensionError, match="visual.*expected dim 6"):
        project(net, np.zeros((2, 5)))


def test_model_pair_requires_shared_classes():
    rng = np.random.default_rng(0)
    with pytest.raises(DimensionError):
        ModelPair(ProjectionNetwork.build(3, 4, 5, rng), ProjectionNetwork.build(3, 4, 6, rng))


def test_label_loss_confident_correct():
    loss, _ = label_loss(np.array([[10.0, -10.0]]), [0])
    assert loss < 1e-4


@pytest.mark.parametrize("c", [2, 5, 15])
def test_label_loss_uniform_logits_is_log_c(c):
    loss, grad = label_loss(np.zeros((3, c)), [0, 1, c - 1])
    assert loss == pytest.approx(math.log(c), abs=1e-15)
    np.testing.assert_allclose(grad.sum(axis=1), 0.0, atol=1e-16)


def test_label_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(6, 5))
    y = rng.integers(0, 5, size=6)

    class Holder:
        def parameters(self):
            return [z]

    def loss_fn(h, _):
        return label_loss(z, y)[0], [label_loss(z, y)[1]]

    assert finite_diff_check(Holder(), loss_fn, None, h=1e-4) < 1e-6


def test_label_loss_nonnegative_and_rows_sum_to_zero():
    rng = np.random.default_rng(9)
    for _ in range(20):
        z = rng.normal(size=(7, 4)) * 10
        loss, grad = label_loss(z, rng.integers(0, 4, size=7))
        assert loss >= 0
        np.testing.assert_allclose(grad.sum(axis=1), 0.0, atol=1e-15)


def test_label_loss_rejects_out_of_range_label():
    with pytest.raises(LabelError, match="label 3 at index 1"):
        label_loss(np.zeros((2, 3)), [0, 3])


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    models = ModelPair.build(4, 6, 5, 3, seed=11)
    path = tmp_path / "m.npz"
    save_checkpoint(models, path, {"epoch": 7})
    loaded, extra = load_checkpoint(path)
    assert extra == {"epoch": 7}
    for a, b in zip(models.parameters(), loaded.parameters()):
        assert a.dtype == b.dtype and a.shape == b.shape
        assert a.tobytes() == b.tobytes()
    assert [l.activation for l in loaded.audio_net.layers] == [
        l.activation for l in models.audio_net.layers
    ]
