"""Small deterministic feedforward network engine.

Networks are immutable stacks of dense layers ending in a softmax layer.
Everything here is plain numpy: forward inference, backprop of the mean
cross-entropy loss, seeded mini-batch SGD, accuracy and JSON round-trips.

Label decisions use ``argmax`` with ties resolved to the lowest class
index. Kill and label-change decisions elsewhere depend on this rule.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError, DimensionError, DnnMutError
from .rng import stream

HIDDEN_ACTIVATIONS = ("relu", "tanh", "sigmoid", "identity")
OUTPUT_ACTIVATION = "softmax"
ACTIVATIONS = HIDDEN_ACTIVATIONS + (OUTPUT_ACTIVATION,)


class TrainingDivergedError(DnnMutError):
    """SGD produced non-finite parameters."""


def _frozen(a, ndim: int, what: str) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    if arr.ndim != ndim:
        raise DimensionError(f"{what} must be {ndim}-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{what} contains NaN or Inf")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Layer:
    """Dense layer computing ``activation(weights @ x + biases)``.

    ``weights`` has shape ``(out, in)``: row ``j`` holds the incoming
    weights of neuron ``j``.
    """

    weights: np.ndarray
    biases: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        w = _frozen(self.weights, 2, "weights")
        b = _frozen(self.biases, 1, "biases")
        if w.shape[0] != b.shape[0]:
            raise DimensionError(f"weights have {w.shape[0]} rows but biases have {b.shape[0]} entries")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "biases", b)

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Layer):
            return NotImplemented
        return (
            self.activation == other.activation
            and np.array_equal(self.weights, other.weights)
            and np.array_equal(self.biases, other.biases)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Network:
    layers: tuple[Layer, ...]
    input_dim: int = field(default=None)
    class_count: int = field(default=None)

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise DimensionError("a network needs at least one layer")
        input_dim = layers[0].in_dim if self.input_dim is None else int(self.input_dim)
        class_count = layers[-1].out_dim if self.class_count is None else int(self.class_count)
        if input_dim < 1:
            raise DimensionError("input_dim must be positive")
        if class_count < 2:
            raise DimensionError("class_count must be at least 2")
        width = input_dim
        for i, layer in enumerate(layers):
            if layer.in_dim != width:
                raise DimensionError(f"layer {i} expects {layer.in_dim} inputs, previous width is {width}")
            last = i == len(layers) - 1
            if last and layer.activation != OUTPUT_ACTIVATION:
                raise ConfigError("the final layer must use the softmax activation")
            if not last and layer.activation == OUTPUT_ACTIVATION:
                raise ConfigError("softmax is only allowed on the final layer")
            width = layer.out_dim
        if width != class_count:
            raise DimensionError(f"final layer has {width} outputs, class_count is {class_count}")
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "input_dim", input_dim)
        object.__setattr__(self, "class_count", class_count)

    @property
    def hidden_layers(self) -> tuple[Layer, ...]:
        return self.layers[:-1]

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [layer.weights.shape for layer in self.layers]

    def parameter_vector(self) -> np.ndarray:
        """All weights then biases of every layer, flattened in layer order."""
        parts = []
        for layer in self.layers:
            parts.append(layer.weights.ravel())
            parts.append(layer.biases)
        return np.concatenate(parts)

    def with_parameters(self, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray]) -> "Network":
        layers = tuple(
            Layer(w, b, layer.activation) for layer, w, b in zip(self.layers, weights, biases)
        )
        return replace(self, layers=layers)

    def __eq__(self, other):
        if not isinstance(other, Network):
            return NotImplemented
        return (
            self.input_dim == other.input_dim
            and self.class_count == other.class_count
            and len(self.layers) == len(other.layers)
            and all(a == b for a, b in zip(self.layers, other.layers))
        )

    __hash__ = None


@dataclass(frozen=True)
class TrainingSpec:
    hidden_sizes: tuple[int, ...] = (8,)
    activations: tuple[str, ...] = ("relu",)
    learning_rate: float = 0.1
    epochs: int = 200
    batch_size: int = 16
    seed: int = 0
    init_scale: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        object.__setattr__(self, "activations", tuple(self.activations))
        if len(self.hidden_sizes) != len(self.activations):
            raise ConfigError("activations must have one entry per hidden layer")
        if any(h < 1 for h in self.hidden_sizes):
            raise ConfigError("hidden sizes must be positive")
        for act in self.activations:
            if act not in HIDDEN_ACTIVATIONS:
                raise ConfigError(f"invalid hidden activation {act!r}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if not self.init_scale > 0:
            raise ConfigError("init_scale must be positive")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")

    def to_dict(self) -> dict:
        return {
            "hidden_sizes": list(self.hidden_sizes),
            "activations": list(self.activations),
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "init_scale": self.init_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingSpec":
        return cls(**d)


# ---------------------------------------------------------------------------
# inference


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * z))
    if name == "identity":
        return z
    raise ConfigError(f"{name!r} is not a hidden activation")


def _act_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0).astype(np.float64)
    if name == "tanh":
        return 1.0 - a * a
    if name == "sigmoid":
        return a * (1.0 - a)
    return np.ones_like(z)


def softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _as_batch(network: Network, x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != network.input_dim:
        raise DimensionError(f"expected inputs of width {network.input_dim}, got shape {np.shape(x)}")
    if not np.all(np.isfinite(arr)):
        raise DataError("inputs contain NaN or Inf")
    return arr, single


def _trace(network: Network, X: np.ndarray):
    """Pre-activations and activations of every layer (activations[0] is X)."""
    acts = [X]
    pre = []
    a = X
    for layer in network.hidden_layers:
        z = a @ layer.weights.T + layer.biases
        a = _act(layer.activation, z)
        pre.append(z)
        acts.append(a)
    out = network.layers[-1]
    pre.append(a @ out.weights.T + out.biases)
    return pre, acts


def logits(network: Network, x) -> np.ndarray:
    X, single = _as_batch(network, x)
    z = _trace(network, X)[0][-1]
    return z[0] if single else z


def forward(network: Network, x) -> np.ndarray:
    """Class probabilities for one input (1-D) or a batch (2-D, one row per input)."""
    X, single = _as_batch(network, x)
    p = softmax(_trace(network, X)[0][-1])
    return p[0] if single else p


def predict_label(network: Network, x):
    """Predicted class index; equal scores resolve to the lowest index."""
    X, single = _as_batch(network, x)
    labels = np.argmax(_trace(network, X)[0][-1], axis=1)
    return int(labels[0]) if single else labels


# ---------------------------------------------------------------------------
# loss and gradients


def _check_labels(network: Network, labels, n: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim == 0:
        y = y[None]
    if y.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise DataError("labels must be integers")
        y = y.astype(np.int64)
    if np.any(y < 0) or np.any(y >= network.class_count):
        raise DataError(f"labels must lie in [0, {network.class_count})")
    return y


def loss(network: Network, inputs, labels) -> float:
    """Mean cross-entropy of the softmax output."""
    X, _ = _as_batch(network, inputs)
    y = _check_labels(network, labels, len(X))
    z = _trace(network, X)[0][-1]
    zmax = z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
    return float(np.mean(logsum - z[np.arange(len(y)), y]))


def _backprop(network: Network, X: np.ndarray, y: np.ndarray):
    pre, acts = _trace(network, X)
    n = len(X)
    delta = softmax(pre[-1])
    delta[np.arange(n), y] -= 1.0
    delta /= n
    grads = [None] * len(network.layers)
    for i in range(len(network.layers) - 1, -1, -1):
        layer = network.layers[i]
        grads[i] = (delta.T @ acts[i], delta.sum(axis=0))
        d_in = delta @ layer.weights
        if i > 0:
            prev = network.layers[i - 1]
            delta = d_in * _act_grad(prev.activation, pre[i - 1], acts[i])
    return grads, d_in


def gradient(network: Network, inputs, labels) -> list[tuple[np.ndarray, np.ndarray]]:
    """Gradient of the mean cross-entropy as ``[(dW, db), ...]`` per layer."""
    X, _ = _as_batch(network, inputs)
    if len(X) == 0:
        raise DataError("gradient needs a non-empty batch")
    y = _check_labels(network, labels, len(X))
    return _backprop(network, X, y)[0]


def input_gradient(network: Network, inputs, labels) -> np.ndarray:
    """Gradient of each sample's own cross-entropy with respect to its input."""
    X, single = _as_batch(network, inputs)
    if len(X) == 0:
        raise DataError("input_gradient needs a non-empty batch")
    y = _check_labels(network, labels, len(X))
    g = _backprop(network, X, y)[1] * len(X)
    return g[0] if single else g


# ---------------------------------------------------------------------------
# training


def init_network(spec: TrainingSpec, input_dim: int, class_count: int) -> Network:
    """Seeded initialization: weights uniform in +-init_scale, zero biases."""
    rng = stream(spec.seed, "init")
    sizes = [input_dim, *spec.hidden_sizes, class_count]
    acts = [*spec.activations, OUTPUT_ACTIVATION]
    layers = []
    for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], acts):
        w = rng.uniform(-spec.init_scale, spec.init_scale, size=(fan_out, fan_in))
        layers.append(Layer(w, np.zeros(fan_out), act))
    return Network(tuple(layers), input_dim, class_count)


def train(spec: TrainingSpec, data) -> Network:
    """Mini-batch SGD on the train split of ``data``.

    Each epoch draws one seeded permutation and walks it in order. The
    result is a pure function of ``(spec, data)``.
    """
    X, y = data.split("train")
    if len(X) == 0:
        raise DataError("train split is empty")
    net = init_network(spec, X.shape[1], data.class_count)
    if spec.epochs == 0:
        return net
    Ws = [layer.weights.copy() for layer in net.layers]
    bs = [layer.biases.copy() for layer in net.layers]
    n = len(X)
    shuffler = stream(spec.seed, "shuffle")
    for epoch in range(spec.epochs):
        order = shuffler.permutation(n)
        for start in range(0, n, spec.batch_size):
            idx = order[start:start + spec.batch_size]
            grads, _ = _backprop(net, X[idx], y[idx])
            for i, (gw, gb) in enumerate(grads):
                Ws[i] -= spec.learning_rate * gw
                bs[i] -= spec.learning_rate * gb
            if not all(np.isfinite(w).all() for w in Ws):
                raise TrainingDivergedError(f"non-finite weights in epoch {epoch}")
            net = net.with_parameters(Ws, bs)
    return net


def accuracy(network: Network, data, split: str = "val") -> float:
    X, y = data.split(split)
    if len(X) == 0:
        raise DataError(f"{split} split is empty")
    return float(np.mean(predict_label(network, X) == y))


# ---------------------------------------------------------------------------
# serialization


def network_to_dict(network: Network) -> dict:
    return {
        "input_dim": network.input_dim,
        "class_count": network.class_count,
        "layers": [
            {
                "weights": layer.weights.tolist(),
                "biases": layer.biases.tolist(),
                "activation": layer.activation,
            }
            for layer in network.layers
        ],
    }


def network_from_dict(d: dict) -> Network:
    try:
        layers = tuple(Layer(ld["weights"], ld["biases"], ld["activation"]) for ld in d["layers"])
        return Network(layers, d["input_dim"], d["class_count"])
    except KeyError as exc:
        raise DataError(f"model is missing field {exc}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"malformed model: {exc}") from None


def _reject_constant(name):
    raise DataError(f"non-finite number {name} in model file")


def dumps_network(network: Network) -> str:
    return json.dumps(network_to_dict(network), allow_nan=False) + "\n"


def loads_network(text: str) -> Network:
    try:
        d = json.loads(text, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise DataError(f"model file is not valid JSON: {exc}") from None
    return network_from_dict(d)


def save_network(network: Network, path) -> None:
    Path(path).write_text(dumps_network(network), encoding="utf-8")


def load_network(path) -> Network:
    return loads_network(Path(path).read_text(encoding="utf-8"))


def random_network(seed: int, sizes: Sequence[int], activations: Sequence[str] | None = None,
                   scale: float = 1.0) -> Network:
    """Network with Gaussian parameters; used by tests and operator sweeps."""
    rng = stream(seed, "random_network")
    if activations is None:
        activations = ["relu"] * (len(sizes) - 2)
    acts = [*activations, OUTPUT_ACTIVATION]
    layers = []
    for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], acts):
        w = rng.normal(0.0, scale / math.sqrt(fan_in), size=(fan_out, fan_in))
        b = rng.normal(0.0, 0.1 * scale, size=fan_out)
        layers.append(Layer(w, b, act))
    return Network(tuple(layers))
