"""Predictive mutation testing.

Predicts whether a mutant will be killed by the test suite from cheap
per-mutant features, so most mutants never have to be run against the
tests. The predictor is a plain logistic model trained by full-batch
gradient descent.

Feature layout (one row per mutant)::

    op_GF op_WS op_NS op_NAI                 model-level operator indicators
    op_label_error ... op_data_shuffle        data operator indicators
    op_layer_removal ... op_learning_rate_scale  program operator indicators
    layer_position                            mean normalized depth of changed layers
    perturbation_magnitude                    GF: gamma*sigma, other model ops: gamma
    weight_delta_norm                         ||theta_mutant - theta|| / ||theta||
    gate_accuracy_drop                        original minus mutant gate accuracy

``gate_accuracy_drop`` costs one pass over the gate split (not the test
suite). Pass ``use_accuracy_drop=False`` to :func:`feature_matrix` to drop it.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import DATA_MUTATIONS, DataMutationSpec
from .errors import ConfigError, DataError, DimensionError
from .mutation_engine import MODEL_OPERATORS, PROGRAM_OPERATORS, MutantRecord
from .nn_core import Network
from .rng import stream

OPERATOR_KINDS = MODEL_OPERATORS + DATA_MUTATIONS + PROGRAM_OPERATORS
FEATURE_NAMES = tuple(f"op_{k}" for k in OPERATOR_KINDS) + (
    "layer_position", "perturbation_magnitude", "weight_delta_norm", "gate_accuracy_drop")
MIN_MUTANTS = 20


@dataclass(frozen=True)
class MutantFeatures:
    mutant_id: int
    operator_onehot: tuple[float, ...]
    layer_position: float
    perturbation_magnitude: float
    weight_delta_norm: float
    gate_accuracy_drop: float

    def vector(self, use_accuracy_drop: bool = True) -> np.ndarray:
        tail = [self.layer_position, self.perturbation_magnitude, self.weight_delta_norm]
        if use_accuracy_drop:
            tail.append(self.gate_accuracy_drop)
        return np.array([*self.operator_onehot, *tail], dtype=np.float64)


def feature_names(use_accuracy_drop: bool = True) -> tuple[str, ...]:
    return FEATURE_NAMES if use_accuracy_drop else FEATURE_NAMES[:-1]


def _magnitude(op) -> float:
    if isinstance(op, DataMutationSpec):
        return op.rate * op.sigma if op.kind == "noise_perturbation" else op.rate
    kind = op.kind
    if kind == "GF":
        return op.gamma * op.sigma
    if kind in MODEL_OPERATORS:
        return op.gamma
    if kind in ("init_skew", "learning_rate_scale"):
        return abs(math.log(op.factor))
    return 1.0


def extract_features(record: MutantRecord, original: Network, baseline_accuracy: float) -> MutantFeatures:
    onehot = tuple(float(record.operator.kind == k) for k in OPERATOR_KINDS)
    same_shape = original.shapes == record.network.shapes
    if not same_shape and record.origin != "source_level_program":
        raise DimensionError(f"mutant {record.id} changes the architecture but is {record.origin}")
    position = 0.0
    if same_shape:
        theta = original.parameter_vector()
        delta = np.linalg.norm(record.network.parameter_vector() - theta)
        norm = np.linalg.norm(theta)
        delta_norm = float(delta / norm) if norm > 0 else float(delta > 0)
        if record.origin == "model_level":
            depth = max(1, len(original.layers) - 1)
            changed = []
            for li, (a, b) in enumerate(zip(original.layers, record.network.layers)):
                n = int(np.sum(a.weights != b.weights) + np.sum(a.biases != b.biases))
                changed.append((li / depth, n))
            total = sum(n for _, n in changed)
            if total:
                position = sum(p * n for p, n in changed) / total
    else:
        delta_norm = 1.0
    return MutantFeatures(record.id, onehot, position, _magnitude(record.operator), delta_norm,
                          baseline_accuracy - record.accuracy)


def feature_matrix(features: Sequence[MutantFeatures], use_accuracy_drop: bool = True) -> np.ndarray:
    return np.array([f.vector(use_accuracy_drop) for f in features], dtype=np.float64)


# ---------------------------------------------------------------------------
# logistic predictor


@dataclass(frozen=True, eq=False)
class PmtModel:
    weights: np.ndarray
    bias: float
    training_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        if w.ndim != 1 or not np.all(np.isfinite(w)) or not math.isfinite(self.bias):
            raise DataError("PMT model parameters must be a finite vector and a finite bias")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", float(self.bias))

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "bias": self.bias, "training_meta": self.training_meta}

    @classmethod
    def from_dict(cls, d: dict) -> "PmtModel":
        return cls(d["weights"], d["bias"], d.get("training_meta", {}))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _as_matrix(features) -> np.ndarray:
    if len(features) and isinstance(features[0], MutantFeatures):
        return feature_matrix(features)
    return np.atleast_2d(np.asarray(features, dtype=np.float64))


def _logloss(Z: np.ndarray, y: np.ndarray, theta: np.ndarray) -> float:
    z = Z @ theta
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


def train_predictor(features, killed_labels, seed: int = 0, epochs: int = 2000,
                    learning_rate: float = 1.0, return_history: bool = False):
    """Fit a logistic model to killed (1) / survived (0) labels.

    Features are standardized internally and the scaling is folded back
    into the returned weights, so the model consumes raw feature vectors.
    The step size is capped at the inverse smoothness constant of the loss,
    which makes the training loss non-increasing. With ``return_history``
    the per-epoch losses come back alongside the model.
    """
    X = _as_matrix(features)
    y = np.asarray(killed_labels, dtype=np.float64)
    if len(X) != len(y):
        raise DimensionError("features and labels differ in length")
    if len(X) < MIN_MUTANTS:
        raise DataError(f"insufficient mutants: need at least {MIN_MUTANTS}, got {len(X)}")
    if not np.all((y == 0) | (y == 1)):
        raise DataError("labels must be 0/1")
    if y.min() == y.max():
        raise DataError("degenerate training set: only one class present")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std[std == 0] = 1.0
    Z = np.column_stack([(X - mean) / std, np.ones(len(X))])
    smooth = np.linalg.eigvalsh(Z.T @ Z / len(Z)).max() / 4.0
    lr = min(learning_rate, 1.0 / smooth)
    theta = stream(seed, "pmt", "init").normal(0.0, 0.01, size=Z.shape[1])
    history = [_logloss(Z, y, theta)]
    for _ in range(epochs):
        p = _sigmoid(Z @ theta)
        theta = theta - lr * (Z.T @ (p - y)) / len(y)
        history.append(_logloss(Z, y, theta))
    w = theta[:-1] / std
    b = theta[-1] - float(np.sum(theta[:-1] * mean / std))
    meta = {"seed": seed, "epochs": epochs, "learning_rate": lr,
            "initial_loss": history[0], "final_loss": history[-1],
            "loss_non_increasing": bool(np.all(np.diff(history) <= 1e-12))}
    model = PmtModel(w, b, meta)
    return (model, history) if return_history else model


def predict_killed(model: PmtModel, f) -> tuple[float, bool]:
    """Kill probability and the thresholded prediction for one mutant."""
    x = f.vector(len(model.weights) == len(FEATURE_NAMES)) if isinstance(f, MutantFeatures) \
        else np.asarray(f, dtype=np.float64)
    if x.shape != model.weights.shape:
        raise DimensionError(f"expected {len(model.weights)} features, got {x.shape}")
    prob = float(_sigmoid(x @ model.weights + model.bias))
    return prob, prob >= 0.5


def predict_many(model: PmtModel, features) -> tuple[np.ndarray, np.ndarray]:
    X = _as_matrix(features)
    if X.shape[1] != len(model.weights):
        raise DimensionError(f"expected {len(model.weights)} features, got {X.shape[1]}")
    prob = _sigmoid(X @ model.weights + model.bias)
    return prob, prob >= 0.5


def evaluate_pmt(predictions, ground_truth, pool_size: int | None = None,
                 fraction_executed: float = 0.0) -> dict:
    """Confusion-matrix metrics against the true killed labels.

    ``executions_avoided`` is ``pool_size * (1 - fraction_executed)``: the
    mutants whose kill status came from the predictor instead of a run.
    """
    pred = np.asarray(predictions, dtype=bool)
    truth = np.asarray(ground_truth, dtype=bool)
    if pred.shape != truth.shape:
        raise DimensionError("predictions and ground truth differ in length")
    if pred.size == 0:
        raise DataError("nothing to evaluate")
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    majority = float(max(truth.mean(), 1.0 - truth.mean()))
    out = {
        "n": int(pred.size),
        "accuracy": float(np.mean(pred == truth)),
        "precision": tp / (tp + fp) if tp + fp else 0.0,
        "recall": tp / (tp + fn) if tp + fn else 0.0,
        "baseline_accuracy": majority,
    }
    if pool_size is not None:
        out["executions_avoided"] = pool_size * (1.0 - fraction_executed)
    return out


def split_holdout(n: int, holdout: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded (train, held-out) index split."""
    if not 0.0 < holdout < 1.0:
        raise ConfigError("holdout fraction must lie in (0, 1)")
    perm = stream(seed, "pmt", "holdout", n).permutation(n)
    k = max(1, int(round(holdout * n)))
    return np.sort(perm[k:]), np.sort(perm[:k])


def permuted_labels(labels, seed: int) -> np.ndarray:
    """Seeded shuffle of the labels; the permutation control for leakage checks."""
    labels = np.asarray(labels)
    return labels[stream(seed, "pmt", "permutation", len(labels)).permutation(len(labels))]


# ---------------------------------------------------------------------------
# files


def write_feature_csv(path, features: Sequence[MutantFeatures], killed=None, probabilities=None,
                      predicted=None) -> None:
    """One row per mutant: ``mutant_id``, every feature column, then optional label columns."""
    header = ["mutant_id", *FEATURE_NAMES]
    extras = [("killed", killed), ("probability", probabilities), ("predicted", predicted)]
    extras = [(name, col) for name, col in extras if col is not None]
    header += [name for name, _ in extras]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i, f in enumerate(features):
            row = [f.mutant_id, *(repr(float(v)) for v in f.vector())]
            for name, col in extras:
                v = col[i]
                row.append(repr(float(v)) if name == "probability" else int(bool(v)))
            w.writerow(row)


def save_model(model: PmtModel, path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), indent=1, allow_nan=False) + "\n", encoding="utf-8")


def load_model(path) -> PmtModel:
    return PmtModel.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
