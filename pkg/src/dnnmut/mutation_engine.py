"""Model-level and source-level mutation, and quality-gated mutant pools.

Model-level operators act on a trained network directly:

==== ======== ==============================================================
GF   weight   add Gaussian noise, scaled by the layer's weight std, to a
              random fraction of all weights
WS   neuron   permute the incoming weights of selected neurons
NS   neuron   swap incoming weights and biases of disjoint neuron pairs
              that share a layer
NAI  neuron   negate incoming weights and bias of selected neurons
==== ======== ==============================================================

Neuron-level operators only touch hidden neurons. The output layer is left
alone because permuting or negating its rows rewires the class labels
themselves rather than the learned features.

Source-level mutants come from retraining on mutated data
(:func:`dnnmut.data.mutate_data`) or a mutated :class:`TrainingSpec`.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import nn_core
from .data import DataMutationSpec, Dataset, mutate_data, selected_count
from .errors import ConfigError, DataError, MutationError, PoolBudgetError
from .nn_core import HIDDEN_ACTIVATIONS, Network, TrainingSpec
from .rng import choose, stream

MODEL_OPERATORS = ("GF", "WS", "NS", "NAI")
PROGRAM_OPERATORS = ("layer_removal", "layer_addition", "activation_change", "init_skew",
                     "learning_rate_scale")
ORIGINS = ("model_level", "source_level_data", "source_level_program")
POOL_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ModelMutationSpec:
    kind: str
    gamma: float
    sigma: float | None = None
    seed: int = 0
    level: str | None = None

    def __post_init__(self):
        if self.kind not in MODEL_OPERATORS:
            raise ConfigError(f"unknown model operator {self.kind!r}")
        expected = "weight" if self.kind == "GF" else "neuron"
        if self.level is None:
            object.__setattr__(self, "level", expected)
        elif self.level != expected:
            raise ConfigError(f"{self.kind} works at {expected} level, not {self.level}")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError("gamma must lie in (0, 1]")
        if self.kind == "GF":
            if self.sigma is None or not self.sigma > 0:
                raise ConfigError("GF needs a positive sigma")

    @property
    def family(self) -> str:
        return "model"

    def with_seed(self, seed: int) -> "ModelMutationSpec":
        return replace(self, seed=seed)

    def to_dict(self) -> dict:
        return {"family": "model", "kind": self.kind, "level": self.level, "gamma": self.gamma,
                "sigma": self.sigma, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelMutationSpec":
        return cls(d["kind"], d["gamma"], d.get("sigma"), d.get("seed", 0), d.get("level"))


@dataclass(frozen=True)
class ProgramMutationSpec:
    """Mutation of the training configuration.

    ``layer_index`` addresses hidden layers; ``factor`` scales the init
    range (``init_skew``) or learning rate (``learning_rate_scale``);
    ``size`` and ``activation`` describe an added or changed layer. A
    ``seed`` other than None replaces the training seed.
    """

    kind: str
    layer_index: int | None = None
    activation: str | None = None
    factor: float | None = None
    size: int | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in PROGRAM_OPERATORS:
            raise ConfigError(f"unknown program operator {self.kind!r}")
        if self.kind in ("init_skew", "learning_rate_scale"):
            if self.factor is None or not self.factor > 0:
                raise ConfigError(f"{self.kind} needs a positive factor")
        if self.kind in ("layer_removal", "layer_addition", "activation_change") and self.layer_index is None:
            raise ConfigError(f"{self.kind} needs a layer_index")
        if self.kind in ("layer_addition", "activation_change"):
            if self.activation not in HIDDEN_ACTIVATIONS:
                raise ConfigError(f"{self.kind} needs a hidden activation, got {self.activation!r}")
        if self.kind == "layer_addition" and (self.size is None or self.size < 1):
            raise ConfigError("layer_addition needs a positive size")

    @property
    def family(self) -> str:
        return "program"

    def to_dict(self) -> dict:
        return {"family": "program", "kind": self.kind, "layer_index": self.layer_index,
                "activation": self.activation, "factor": self.factor, "size": self.size,
                "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "ProgramMutationSpec":
        return cls(d["kind"], d.get("layer_index"), d.get("activation"), d.get("factor"),
                   d.get("size"), d.get("seed"))


def spec_from_dict(d: dict):
    family = d.get("family", "model")
    if family == "model":
        return ModelMutationSpec.from_dict(d)
    if family == "data":
        return DataMutationSpec.from_dict(d)
    if family == "program":
        return ProgramMutationSpec.from_dict(d)
    raise ConfigError(f"unknown operator family {family!r}")


@dataclass(frozen=True, eq=False)
class MutantRecord:
    id: int
    origin: str
    operator: object
    network: Network
    accuracy: float
    retained: bool

    def __post_init__(self):
        if self.origin not in ORIGINS:
            raise ConfigError(f"unknown origin {self.origin!r}")

    def to_dict(self) -> dict:
        return {"id": self.id, "origin": self.origin, "operator": self.operator.to_dict(),
                "accuracy": self.accuracy, "retained": self.retained}


# ---------------------------------------------------------------------------
# model-level operators


def _neuron_index(network: Network) -> list[tuple[int, int]]:
    """(layer, row) for every hidden neuron, in layer order."""
    return [(li, j) for li, layer in enumerate(network.hidden_layers) for j in range(layer.out_dim)]


def _select_neurons(network: Network, spec: ModelMutationSpec) -> list[tuple[int, int]]:
    neurons = _neuron_index(network)
    if not neurons:
        raise MutationError("empty mutation: the network has no hidden neurons")
    k = selected_count(spec.gamma, len(neurons))
    if k == 0:
        raise MutationError("empty mutation: gamma selects no neurons")
    return [neurons[i] for i in choose(spec.seed, len(neurons), k, spec.kind)]


def _select_pairs(network: Network, spec: ModelMutationSpec) -> list[tuple[int, int, int]]:
    """Disjoint (layer, a, b) neuron pairs; the selection depends only on shapes and seed."""
    rng = stream(spec.seed, "NS", "pairing")
    candidates = []
    for li, layer in enumerate(network.hidden_layers):
        perm = rng.permutation(layer.out_dim)
        for p in range(layer.out_dim // 2):
            a, b = sorted((int(perm[2 * p]), int(perm[2 * p + 1])))
            candidates.append((li, a, b))
    if not candidates:
        raise MutationError("NS needs a hidden layer with at least two neurons")
    n_neurons = len(_neuron_index(network))
    k = min(len(candidates), math.ceil(round(spec.gamma * n_neurons / 2, 9)))
    if k == 0:
        raise MutationError("empty mutation: gamma selects no neuron pairs")
    return [candidates[i] for i in choose(spec.seed, len(candidates), k, "NS")]


def apply_model_operator(network: Network, spec: ModelMutationSpec) -> Network:
    """Return a mutated copy of ``network``; the input is never modified."""
    Ws = [layer.weights.copy() for layer in network.layers]
    bs = [layer.biases.copy() for layer in network.layers]

    if spec.kind == "GF":
        sizes = [w.size for w in Ws]
        total = sum(sizes)
        k = selected_count(spec.gamma, total)
        if k == 0:
            raise MutationError("empty mutation: gamma selects no weights")
        flat = choose(spec.seed, total, k, "GF")
        noise = stream(spec.seed, "GF", "noise").normal(0.0, 1.0, size=k)
        offsets = np.cumsum([0] + sizes)
        layer_of = np.searchsorted(offsets, flat, side="right") - 1
        for li in np.unique(layer_of):
            mask = layer_of == li
            scale = float(np.std(network.layers[li].weights))
            if scale == 0.0:
                scale = 1.0
            view = Ws[li].reshape(-1)
            view[flat[mask] - offsets[li]] += spec.sigma * scale * noise[mask]

    elif spec.kind == "WS":
        rng = stream(spec.seed, "WS", "perm")
        for li, j in _select_neurons(network, spec):
            Ws[li][j] = Ws[li][j][rng.permutation(Ws[li].shape[1])]

    elif spec.kind == "NS":
        for li, a, b in _select_pairs(network, spec):
            Ws[li][[a, b]] = Ws[li][[b, a]]
            bs[li][[a, b]] = bs[li][[b, a]]

    elif spec.kind == "NAI":
        for li, j in _select_neurons(network, spec):
            Ws[li][j] = -Ws[li][j]
            bs[li][j] = -bs[li][j]

    return network.with_parameters(Ws, bs)


# ---------------------------------------------------------------------------
# source-level operators


def apply_program_operator(spec: TrainingSpec, pspec: ProgramMutationSpec) -> TrainingSpec:
    hidden = list(spec.hidden_sizes)
    acts = list(spec.activations)
    kind = pspec.kind
    if kind in ("layer_removal", "activation_change"):
        if not hidden:
            raise MutationError(f"{kind} needs at least one hidden layer")
        if not 0 <= pspec.layer_index < len(hidden):
            raise MutationError(f"layer index {pspec.layer_index} outside hidden layers 0..{len(hidden) - 1}")
    out = spec
    if kind == "layer_removal":
        del hidden[pspec.layer_index]
        del acts[pspec.layer_index]
        out = replace(spec, hidden_sizes=tuple(hidden), activations=tuple(acts))
    elif kind == "layer_addition":
        if not 0 <= pspec.layer_index <= len(hidden):
            raise MutationError(f"insert position {pspec.layer_index} outside 0..{len(hidden)}")
        hidden.insert(pspec.layer_index, pspec.size)
        acts.insert(pspec.layer_index, pspec.activation)
        out = replace(spec, hidden_sizes=tuple(hidden), activations=tuple(acts))
    elif kind == "activation_change":
        acts[pspec.layer_index] = pspec.activation
        out = replace(spec, activations=tuple(acts))
    elif kind == "init_skew":
        out = replace(spec, init_scale=spec.init_scale * pspec.factor)
    elif kind == "learning_rate_scale":
        out = replace(spec, learning_rate=spec.learning_rate * pspec.factor)
    if pspec.seed is not None:
        out = replace(out, seed=pspec.seed)
    return out


def build_source_mutant(base_spec: TrainingSpec, data: Dataset, mutation, *, gate_split: str = "val",
                        mutant_id: int = 0, original_accuracy: float | None = None,
                        quality_ratio: float = 0.9) -> MutantRecord:
    """Retrain from scratch under a mutated dataset or training spec.

    ``retained`` reflects the quality gate when ``original_accuracy`` is
    given and is True otherwise.
    """
    if isinstance(mutation, DataMutationSpec):
        net = nn_core.train(base_spec, mutate_data(data, mutation))
        origin = "source_level_data"
    elif isinstance(mutation, ProgramMutationSpec):
        net = nn_core.train(apply_program_operator(base_spec, mutation), data)
        origin = "source_level_program"
    else:
        raise ConfigError(f"not a source-level mutation: {mutation!r}")
    acc = nn_core.accuracy(net, data, gate_split)
    retained = original_accuracy is None or acc >= quality_ratio * original_accuracy
    return MutantRecord(mutant_id, origin, mutation, net, acc, retained)


# ---------------------------------------------------------------------------
# pool generation


@dataclass
class PoolStats:
    original_accuracy: float
    threshold: float
    attempts: int = 0
    per_operator: dict = field(default_factory=dict)
    rejected: list = field(default_factory=list)

    def record(self, rec: MutantRecord) -> None:
        kind = rec.operator.kind
        entry = self.per_operator.setdefault(kind, {"attempted": 0, "retained": 0, "rejected": 0})
        entry["attempted"] += 1
        entry["retained" if rec.retained else "rejected"] += 1
        self.attempts += 1
        if not rec.retained:
            self.rejected.append({"id": rec.id, "kind": kind, "accuracy": rec.accuracy})

    def rejection_rates(self) -> dict[str, float]:
        return {k: v["rejected"] / v["attempted"] for k, v in self.per_operator.items()}

    def to_dict(self) -> dict:
        return {
            "original_accuracy": self.original_accuracy,
            "threshold": self.threshold,
            "attempts": self.attempts,
            "per_operator": {k: dict(v, rejection_rate=v["rejected"] / v["attempted"])
                             for k, v in sorted(self.per_operator.items())},
            "rejected": list(self.rejected),
        }


def _candidate(network, data, template, i, base_seed, gate_split, threshold) -> MutantRecord:
    spec = template.with_seed(base_seed + i)
    mutant = apply_model_operator(network, spec)
    acc = nn_core.accuracy(mutant, data, gate_split)
    return MutantRecord(i, "model_level", spec, mutant, acc, acc >= threshold)


def generate_pool(network: Network, data: Dataset, op_mix: Sequence[ModelMutationSpec], count: int,
                  quality_ratio: float = 0.9, gate_split: str = "val", *, base_seed: int = 0,
                  max_attempts: int | None = None, workers: int = 1,
                  keep_rejected: bool = False):
    """Build ``count`` model-level mutants that pass the accuracy gate.

    Candidate ``i`` uses template ``op_mix[i % len(op_mix)]`` with seed
    ``base_seed + i``, and is kept iff its gate-split accuracy is at least
    ``quality_ratio`` times the original's. Returns ``(pool, stats)``, plus
    the rejected records when ``keep_rejected`` is set. The result does not
    depend on ``workers``.
    """
    if count < 1:
        raise ConfigError("count must be at least 1")
    if not 0.0 < quality_ratio <= 1.0:
        raise ConfigError("quality_ratio must lie in (0, 1]")
    if not op_mix:
        raise ConfigError("op_mix is empty")
    original_acc = nn_core.accuracy(network, data, gate_split)
    if original_acc <= 0:
        raise DataError("original accuracy on the gate split is zero")
    if max_attempts is None:
        max_attempts = 10 * count
    threshold = quality_ratio * original_acc
    stats = PoolStats(original_acc, threshold)
    pool: list[MutantRecord] = []
    rejected: list[MutantRecord] = []

    def make(i):
        return _candidate(network, data, op_mix[i % len(op_mix)], i, base_seed, gate_split, threshold)

    chunk = max(1, workers) * 8
    executor = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        i = 0
        while len(pool) < count and i < max_attempts:
            ids = range(i, min(i + chunk, max_attempts))
            batch = list(executor.map(make, ids)) if executor else [make(j) for j in ids]
            for rec in batch:
                if len(pool) >= count:
                    break
                stats.record(rec)
                (pool if rec.retained else rejected).append(rec)
            i = ids.stop
    finally:
        if executor:
            executor.shutdown()
    if len(pool) < count:
        raise PoolBudgetError(
            f"only {len(pool)} of {count} mutants passed the gate in {max_attempts} attempts", pool, stats)
    if keep_rejected:
        return pool, stats, rejected
    return pool, stats


# ---------------------------------------------------------------------------
# pool archives


def save_pool(directory, pool: Iterable[MutantRecord], stats: PoolStats | dict | None = None,
              config: dict | None = None) -> None:
    """Write ``pool.json`` and one ``mutant_<id>.json`` per retained record."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    pool = list(pool)
    for old in directory.glob("mutant_*.json"):
        old.unlink()
    for rec in pool:
        if rec.retained:
            nn_core.save_network(rec.network, directory / f"mutant_{rec.id}.json")
    doc = {
        "schema_version": POOL_SCHEMA_VERSION,
        "config": config or {},
        "stats": stats.to_dict() if isinstance(stats, PoolStats) else (stats or {}),
        "records": [rec.to_dict() for rec in pool],
    }
    (directory / "pool.json").write_text(json.dumps(doc, indent=1, allow_nan=False) + "\n", encoding="utf-8")


def load_pool(directory) -> tuple[list[MutantRecord], dict]:
    """Read a pool archive; returns retained records (in archive order) and the document."""
    directory = Path(directory)
    path = directory / "pool.json"
    if not path.exists():
        raise DataError(f"{directory}: not a pool archive (pool.json missing)")
    doc = json.loads(path.read_text(encoding="utf-8"))
    records = []
    for rd in doc["records"]:
        if not rd["retained"]:
            continue
        net = nn_core.load_network(directory / f"mutant_{rd['id']}.json")
        records.append(MutantRecord(rd["id"], rd["origin"], spec_from_dict(rd["operator"]), net,
                                    rd["accuracy"], True))
    return records, doc
