import numpy as np
import pytest

from src.learning.networks import Activation, DenseNet, gelu, layer_norm
from src.learning.optimizer import Adam, NaturalGradientAscent
from src.utils.exceptions import NonFinite, ShapeMismatch


def test_dense_net_shapes_and_names(gen):
    net = DenseNet("enc", [3, 5, 4], hidden_activation=Activation.TANH)
    params = net.init_params(gen)
    assert net.param_names() == ["enc.0.W", "enc.0.b", "enc.1.W", "enc.1.b"]
    assert params["enc.0.W"].shape == (3, 5)
    assert net.apply(params, gen.standard_normal((7, 3))).shape == (7, 4)


def test_dense_net_rejects_wrong_width(gen):
    net = DenseNet("dec", [2, 3])
    with pytest.raises(ShapeMismatch):
        net.apply(net.init_params(gen), np.zeros((4, 5)))
    with pytest.raises(ShapeMismatch):
        DenseNet("dec", [2])


def test_layer_norm_standardizes_rows(gen):
    out = layer_norm(3.0 + 2.0 * gen.standard_normal((4, 6)))
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, rtol=1e-4)


def test_layer_norm_applies_to_hidden_layers_only():
    net = DenseNet("enc", [2, 4, 3], layer_norm=True)
    assert [layer.layer_norm for layer in net.layers] == [True, False]


def test_gelu_fixed_points():
    np.testing.assert_allclose(gelu(np.array([0.0, 10.0, -10.0])), [0.0, 10.0, 0.0], atol=1e-12)


def test_adam_with_zero_rate_returns_parameters_unchanged(gen):
    params = {"w": gen.standard_normal(3)}
    updated = Adam(lr=0.0).step(params, {"w": gen.standard_normal(3)})
    assert updated["w"] is params["w"]


def test_adam_first_step_moves_by_learning_rate():
    params = {"w": np.array([1.0, 1.0]), "frozen": np.array([2.0])}
    updated = Adam(lr=0.1).step(params, {"w": np.array([3.0, -0.5])})
    np.testing.assert_allclose(updated["w"], [0.9, 1.1], rtol=1e-6)
    assert updated["frozen"] is params["frozen"]


def test_optimizers_reject_non_finite_updates():
    with pytest.raises(NonFinite):
        Adam().step({"w": np.zeros(1)}, {"w": np.array([np.nan])})
    with pytest.raises(NonFinite):
        NaturalGradientAscent().step({"w": np.zeros(1)}, {"w": np.array([np.inf])})


def test_natural_gradient_ascent_adds_scaled_direction():
    updated = NaturalGradientAscent(lr=0.5).step({"g": np.array([1.0])}, {"g": np.array([4.0])})
    np.testing.assert_allclose(updated["g"], [3.0])
