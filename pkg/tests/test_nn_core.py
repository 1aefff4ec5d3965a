import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dnnmut import nn_core
from dnnmut.data import Dataset, generate_synthetic
from dnnmut.errors import DataError, DimensionError, ConfigError
from dnnmut.nn_core import Layer, Network, TrainingSpec
from oracles import finite_difference, relative_error


def single_layer(weights, biases):
    return Network((Layer(weights, biases, "softmax"),))


# --- forward ----------------------------------------------------------------


def test_forward_zero_network_is_uniform():
    net = single_layer(np.zeros((3, 4)), np.zeros(3))
    np.testing.assert_allclose(nn_core.forward(net, [1.0, -2.0, 3.0, 0.5]), [1 / 3] * 3, atol=1e-15)


def test_forward_equal_logits():
    net = single_layer([[1.0], [-1.0]], [0.0, 0.0])
    np.testing.assert_allclose(nn_core.forward(net, [0.0]), [0.5, 0.5])


def test_forward_hand_evaluated_softmax():
    net = single_layer(np.eye(2), np.zeros(2))
    e2 = math.exp(2.0)
    p = nn_core.forward(net, [2.0, 0.0])
    np.testing.assert_allclose(p, [e2 / (e2 + 1), 1 / (e2 + 1)], rtol=1e-12)
    assert p[0] == pytest.approx(0.8808, abs=1e-4)
    assert nn_core.predict_label(net, [2.0, 0.0]) == 0


def test_forward_rejects_wrong_width():
    net = single_layer(np.eye(2), np.zeros(2))
    with pytest.raises(DimensionError):
        nn_core.forward(net, [1.0, 2.0, 3.0])
    with pytest.raises(DataError):
        nn_core.forward(net, [np.nan, 1.0])


def test_predict_label_tie_breaks_low():
    net = single_layer(np.zeros((3, 2)), np.zeros(3))
    assert nn_core.predict_label(net, [0.3, 0.1]) == 0
    skew = single_layer(np.zeros((3, 1)), np.log([0.1, 0.7, 0.2]))
    assert nn_core.predict_label(skew, [5.0]) == 1


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32), x=st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3))
def test_forward_output_is_simplex_point(seed, x):
    net = nn_core.random_network(seed, [3, 5, 4], ["tanh"], scale=3.0)
    p = nn_core.forward(net, x)
    assert abs(p.sum() - 1.0) <= 1e-9
    assert np.all(p >= 0) and np.all(p <= 1)


def test_network_invariants():
    with pytest.raises(DimensionError):
        Network((Layer(np.zeros((4, 2)), np.zeros(4), "relu"), Layer(np.zeros((2, 3)), np.zeros(2), "softmax")))
    with pytest.raises(ConfigError):
        Network((Layer(np.zeros((4, 2)), np.zeros(4), "softmax"), Layer(np.zeros((2, 4)), np.zeros(2), "softmax")))
    with pytest.raises(DataError):
        Layer([[np.inf]], [0.0], "softmax")
    with pytest.raises(DimensionError):
        Layer(np.zeros((2, 2)), np.zeros(3), "relu")


# --- gradient ---------------------------------------------------------------


def test_gradient_symmetric_batch_has_zero_bias_gradient():
    net = single_layer(np.zeros((2, 2)), np.zeros(2))
    X = np.array([[1.0, 2.0], [-1.0, -2.0], [0.5, -0.3], [-0.5, 0.3]])
    y = np.array([0, 1, 1, 0])
    (_, db), = nn_core.gradient(net, X, y)
    np.testing.assert_allclose(db, 0.0, atol=1e-15)


def test_gradient_is_duplication_invariant(rng):
    net = nn_core.random_network(3, [3, 4, 3], ["tanh"])
    X = rng.normal(size=(6, 3))
    y = rng.integers(0, 3, size=6)
    g1 = nn_core.gradient(net, X, y)
    g2 = nn_core.gradient(net, np.vstack([X, X]), np.concatenate([y, y]))
    for (a, b), (c, d) in zip(g1, g2):
        np.testing.assert_allclose(a, c, rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(b, d, rtol=1e-12, atol=1e-15)


def test_gradient_matches_finite_differences_on_2_4_2(rng):
    net = nn_core.random_network(11, [2, 4, 2], ["tanh"])
    X = rng.normal(size=(8, 2))
    y = rng.integers(0, 2, size=8)
    for (gw, gb), (fw, fb) in zip(nn_core.gradient(net, X, y), finite_difference(net, X, y)):
        assert relative_error(gw, fw) < 1e-4
        assert relative_error(gb, fb) < 1e-4


def test_gradient_empty_batch():
    net = nn_core.random_network(0, [2, 2])
    with pytest.raises(DataError):
        nn_core.gradient(net, np.zeros((0, 2)), np.zeros(0, dtype=int))


def test_input_gradient_matches_finite_differences(rng):
    net = nn_core.random_network(5, [3, 6, 3], ["sigmoid"])
    x = rng.normal(size=3)
    g = nn_core.input_gradient(net, x, 2)
    h = 1e-6
    fd = np.array([(nn_core.loss(net, x + h * e, [2]) - nn_core.loss(net, x - h * e, [2])) / (2 * h)
                   for e in np.eye(3)])
    assert relative_error(g, fd) < 1e-6


# --- training and accuracy --------------------------------------------------


def test_train_zero_epochs_returns_initialization(moons):
    spec = TrainingSpec(hidden_sizes=(4,), activations=("relu",), epochs=0, seed=9)
    net = nn_core.train(spec, moons)
    assert net == nn_core.init_network(spec, 2, 2)
    assert np.all(np.abs(net.layers[0].weights) <= spec.init_scale)


def test_train_is_deterministic(moons):
    spec = TrainingSpec(hidden_sizes=(6,), activations=("tanh",), epochs=5, seed=3)
    assert nn_core.dumps_network(nn_core.train(spec, moons)) == nn_core.dumps_network(nn_core.train(spec, moons))


def test_train_on_blobs():
    blobs = generate_synthetic("blobs", 200, 0.5, 7)
    net = nn_core.train(TrainingSpec(hidden_sizes=(8,), activations=("relu",), epochs=200), blobs)
    assert nn_core.accuracy(net, blobs, "train") >= 0.95
    assert nn_core.accuracy(net, blobs, "test") >= 0.9


def test_train_rejects_empty_train_split():
    d = Dataset([[0.0], [1.0]], [0, 1], ["val", "test"], 2)
    with pytest.raises(DataError):
        nn_core.train(TrainingSpec(hidden_sizes=(), activations=()), d)


def test_training_spec_validation():
    with pytest.raises(ConfigError):
        TrainingSpec(hidden_sizes=(4, 4), activations=("relu",))
    with pytest.raises(ConfigError):
        TrainingSpec(learning_rate=0.0)


def test_accuracy_counts_matches():
    X = np.arange(10, dtype=float)[:, None]
    y = np.array([0, 0, 0, 0, 1, 1, 1, 1, 1, 1])
    d = Dataset(X, y, ["test"] * 10, 2)
    constant_zero = single_layer(np.zeros((2, 1)), [1.0, 0.0])
    assert nn_core.accuracy(constant_zero, d, "test") == pytest.approx(0.4)
    with pytest.raises(DataError):
        nn_core.accuracy(constant_zero, d, "train")


def test_accuracy_memorized_sample():
    d = Dataset([[3.0, -1.0]], [1], ["val"], 2)
    net = single_layer([[0.0, 1.0], [1.0, 0.0]], [0.0, 0.0])
    assert nn_core.accuracy(net, d, "val") == 1.0


def test_trained_moons_network_generalizes(moons, moons_net):
    assert nn_core.accuracy(moons_net, moons, "test") >= 0.9


# --- serialization ----------------------------------------------------------


def test_serialization_round_trip(rng, tmp_path):
    net = nn_core.random_network(21, [4, 7, 5, 3], ["tanh", "relu"])
    path = tmp_path / "m.json"
    nn_core.save_network(net, path)
    back = nn_core.load_network(path)
    assert back == net
    X = rng.normal(size=(100, 4))
    np.testing.assert_allclose(nn_core.forward(back, X), nn_core.forward(net, X), atol=1e-12, rtol=0)


def test_loader_rejects_nan_and_mismatch():
    with pytest.raises(DataError):
        nn_core.loads_network('{"input_dim": 1, "class_count": 2, "layers": '
                              '[{"weights": [[NaN], [1.0]], "biases": [0, 0], "activation": "softmax"}]}')
    with pytest.raises(DataError):
        nn_core.loads_network('{"input_dim": 2, "class_count": 2, "layers": '
                              '[{"weights": [[1.0], [1.0]], "biases": [0, 0], "activation": "softmax"}]}')
    with pytest.raises(DataError):
        nn_core.loads_network('{"input_dim": 1, "class_count": 2}')
