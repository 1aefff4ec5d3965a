"""Datasets, synthetic generators, CSV ingestion and data mutation operators."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError
from .rng import choose, stream

SPLITS = ("train", "val", "test")
DATA_MUTATIONS = ("label_error", "data_missing", "data_repetition", "noise_perturbation", "data_shuffle")
DEFAULT_FRACTIONS = (0.6, 0.2, 0.2)


def _readonly(a, dtype):
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Dataset:
    """Feature matrix with integer labels and a train/val/test tag per row."""

    features: np.ndarray
    labels: np.ndarray
    split_tags: np.ndarray
    class_count: int
    provenance: str = ""

    def __post_init__(self):
        X = _readonly(self.features, np.float64)
        y = np.asarray(self.labels)
        if y.size and not np.all(np.equal(np.mod(y, 1), 0)):
            raise DataError("labels must be integers")
        y = _readonly(y, np.int64)
        tags = _readonly(self.split_tags, "<U5")
        if X.ndim != 2:
            raise DataError(f"features must be 2-D, got shape {X.shape}")
        n = X.shape[0]
        if n < 1:
            raise DataError("empty dataset")
        if y.shape != (n,) or tags.shape != (n,):
            raise DataError("features, labels and split_tags must have the same length")
        if int(self.class_count) < 2:
            raise DataError("class_count must be at least 2")
        if np.any(y < 0) or np.any(y >= self.class_count):
            raise DataError(f"labels must lie in [0, {self.class_count})")
        if not np.all(np.isfinite(X)):
            raise DataError("features contain NaN or Inf")
        bad = set(np.unique(tags)) - set(SPLITS)
        if bad:
            raise DataError(f"unknown split tags {sorted(bad)}")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "split_tags", tags)
        object.__setattr__(self, "class_count", int(self.class_count))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def indices(self, split: str) -> np.ndarray:
        if split not in SPLITS:
            raise ConfigError(f"unknown split {split!r}")
        return np.flatnonzero(self.split_tags == split)

    def split(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.indices(split)
        return self.features[idx], self.labels[idx]

    def split_sizes(self) -> dict[str, int]:
        return {s: int(np.sum(self.split_tags == s)) for s in SPLITS}

    def feature_range(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-feature observed minimum and maximum over all rows."""
        return self.features.min(axis=0), self.features.max(axis=0)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.class_count == other.class_count
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.split_tags, other.split_tags)
        )

    __hash__ = None

    def to_dict(self) -> dict:
        return {
            "class_count": self.class_count,
            "provenance": self.provenance,
            "features": self.features.tolist(),
            "labels": self.labels.tolist(),
            "split_tags": self.split_tags.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Dataset":
        try:
            return cls(np.array(d["features"], dtype=np.float64).reshape(len(d["features"]), -1),
                       d["labels"], d["split_tags"], d["class_count"], d.get("provenance", ""))
        except KeyError as exc:
            raise DataError(f"dataset archive is missing field {exc}") from None


def save_dataset(data: Dataset, path) -> None:
    Path(path).write_text(json.dumps(data.to_dict(), allow_nan=False) + "\n", encoding="utf-8")


def load_dataset(path) -> Dataset:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not valid JSON ({exc})") from None
    return Dataset.from_dict(d)


# ---------------------------------------------------------------------------
# splitting


def split_sizes(n: int, fractions: Sequence[float]) -> tuple[int, int, int]:
    """Largest-remainder rounding of ``fractions`` (train, val, test) onto ``n`` rows.

    Remainder ties go to the earlier split.
    """
    f = np.asarray(fractions, dtype=np.float64)
    if f.shape != (3,) or np.any(f < 0) or not f.sum() > 0:
        raise ConfigError(f"split fractions must be three non-negative numbers, got {fractions}")
    f = f / f.sum()
    raw = f * n
    sizes = np.floor(raw).astype(int)
    remainder = raw - sizes
    order = sorted(range(3), key=lambda i: (-remainder[i], i))
    for i in order[: n - sizes.sum()]:
        sizes[i] += 1
    return tuple(int(s) for s in sizes)


def assign_splits(n: int, fractions: Sequence[float], seed: int) -> np.ndarray:
    sizes = split_sizes(n, fractions)
    tags = np.array(["train"] * sizes[0] + ["val"] * sizes[1] + ["test"] * sizes[2], dtype="<U5")
    perm = stream(seed, "split", n).permutation(n)
    out = np.empty(n, dtype="<U5")
    out[perm] = tags
    return out


# ---------------------------------------------------------------------------
# generators


def generate_synthetic(kind: str, n: int, noise: float, seed: int,
                       fractions: Sequence[float] = DEFAULT_FRACTIONS) -> Dataset:
    """Two-class 2-D benchmark data: ``blobs``, ``two_moons`` or ``spirals``.

    Class 0 gets ``ceil(n/2)`` rows and class 1 gets ``floor(n/2)``;
    ``noise`` is the standard deviation of isotropic Gaussian jitter.
    """
    if n < 4:
        raise DataError(f"need n >= 4 samples, got {n}")
    if noise < 0:
        raise ConfigError("noise must be non-negative")
    rng = stream(seed, "synthetic", kind)
    counts = ((n + 1) // 2, n // 2)
    if kind == "blobs":
        centers = np.array([[-2.0, -2.0], [2.0, 2.0]])
        X = np.vstack([np.repeat(centers[c][None], counts[c], axis=0) for c in (0, 1)])
    elif kind == "two_moons":
        t0 = np.linspace(0.0, math.pi, counts[0])
        t1 = np.linspace(0.0, math.pi, counts[1])
        upper = np.column_stack([np.cos(t0), np.sin(t0)])
        lower = np.column_stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)])
        X = np.vstack([upper, lower])
    elif kind == "spirals":
        parts = []
        for c in (0, 1):
            t = np.linspace(0.25, 3.0 * math.pi, counts[c])
            r = t / (3.0 * math.pi)
            sgn = 1.0 if c == 0 else -1.0
            parts.append(sgn * np.column_stack([r * np.cos(t), r * np.sin(t)]))
        X = np.vstack(parts)
    else:
        raise ConfigError(f"unknown synthetic kind {kind!r}")
    y = np.concatenate([np.zeros(counts[0], dtype=np.int64), np.ones(counts[1], dtype=np.int64)])
    if noise > 0:
        X = X + rng.normal(0.0, noise, size=X.shape)
    tags = assign_splits(n, fractions, seed)
    return Dataset(X, y, tags, 2, f"synthetic:{kind} n={n} noise={noise} seed={seed}")


def load_csv(path, label_column: str, fractions: Sequence[float] = DEFAULT_FRACTIONS,
             seed: int = 0) -> Dataset:
    """Read a headed CSV file; every column except ``label_column`` must be numeric.

    Labels are re-indexed densely in sorted order of their distinct values.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError("empty dataset")
    header, body = rows[0], [r for r in rows[1:] if r]
    if label_column not in header:
        raise DataError(f"label column {label_column!r} not in header {header}")
    li = header.index(label_column)
    feature_cols = [i for i in range(len(header)) if i != li]
    if not feature_cols:
        raise DataError("need at least one numeric feature column")
    if not body:
        raise DataError("empty dataset")
    X = np.empty((len(body), len(feature_cols)))
    raw_labels = []
    for r, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise DataError(f"row {r}: expected {len(header)} cells, got {len(row)}")
        for j, c in enumerate(feature_cols):
            try:
                X[r - 2, j] = float(row[c])
            except ValueError:
                raise DataError(f"row {r}, column {header[c]!r}: cannot parse {row[c]!r} as a number") from None
        raw_labels.append(row[li])
    if not np.all(np.isfinite(X)):
        raise DataError("features contain NaN or Inf")
    classes = sorted(set(raw_labels), key=_label_sort_key)
    index = {c: i for i, c in enumerate(classes)}
    y = np.array([index[v] for v in raw_labels], dtype=np.int64)
    tags = assign_splits(len(body), fractions, seed)
    return Dataset(X, y, tags, max(2, len(classes)), f"csv:{path.name} label={label_column}")


def _label_sort_key(v: str):
    try:
        return (0, float(v), v)
    except ValueError:
        return (1, 0.0, v)


def save_csv(path, features: np.ndarray, labels=None, extra: dict | None = None) -> None:
    """Write samples as CSV with columns ``x0..x{d-1}`` plus optional label/extra columns."""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    cols = [f"x{j}" for j in range(features.shape[1])]
    extra = extra or {}
    header = cols + (["label"] if labels is not None else []) + list(extra)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i, row in enumerate(features):
            cells = [repr(float(v)) for v in row]
            if labels is not None:
                cells.append(str(int(labels[i])))
            cells.extend(str(extra[k][i]) for k in extra)
            w.writerow(cells)


# ---------------------------------------------------------------------------
# data mutation


@dataclass(frozen=True)
class DataMutationSpec:
    kind: str
    rate: float
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DATA_MUTATIONS:
            raise ConfigError(f"unknown data mutation {self.kind!r}")
        if not 0.0 <= self.rate <= 1.0:
            raise ConfigError("rate must lie in [0, 1]")
        if self.sigma < 0:
            raise ConfigError("sigma must be non-negative")

    def to_dict(self) -> dict:
        return {"family": "data", "kind": self.kind, "rate": self.rate, "sigma": self.sigma, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "DataMutationSpec":
        return cls(d["kind"], d["rate"], d.get("sigma", 0.0), d.get("seed", 0))


def selected_count(rate: float, n: int) -> int:
    # guards against 0.1*30 = 3.0000000000000004 style ceilings
    return min(n, math.ceil(round(rate * n, 9)))


def mutate_data(data: Dataset, spec: DataMutationSpec) -> Dataset:
    """Corrupt the train split; val and test rows are copied through untouched."""
    train = data.indices("train")
    if len(train) == 0:
        raise DataError("dataset has no train split")
    k = selected_count(spec.rate, len(train))
    picked = train[choose(spec.seed, len(train), k, "data", spec.kind)]
    rng = stream(spec.seed, "data", spec.kind, "values")
    X = data.features.copy()
    y = data.labels.copy()
    tags = data.split_tags.copy()
    note = f"{data.provenance} | {spec.kind} rate={spec.rate}"

    if spec.kind == "label_error":
        shift = rng.integers(1, data.class_count, size=k)
        y[picked] = (y[picked] + shift) % data.class_count
    elif spec.kind == "data_missing":
        if k >= len(train):
            raise DataError("train split would be empty")
        keep = np.ones(data.n, dtype=bool)
        keep[picked] = False
        X, y, tags = X[keep], y[keep], tags[keep]
    elif spec.kind == "data_repetition":
        X = np.vstack([X, X[picked]])
        y = np.concatenate([y, y[picked]])
        tags = np.concatenate([tags, tags[picked]])
    elif spec.kind == "noise_perturbation":
        if spec.sigma > 0:
            X[picked] += rng.normal(0.0, spec.sigma, size=(k, data.dim))
    elif spec.kind == "data_shuffle":
        if k > 1:
            moved = rng.permutation(picked)
            X[picked] = data.features[moved]
            y[picked] = data.labels[moved]
    return Dataset(X, y, tags, data.class_count, note)
