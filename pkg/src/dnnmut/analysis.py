"""Kill matrices, mutation score, label change rate and runtime detection.

A mutant kills a test sample when the original model classifies the sample
correctly and the mutant predicts a different label. The label change rate
(LCR) of an input is the fraction of mutants whose label differs from the
original model's label for it; no ground truth is involved.

Runtime detection evaluates mutants one at a time and stops with Wald's
sequential probability ratio test on the count of label changes.
"""

from __future__ import annotations

import base64
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import nn_core
from .data import Dataset
from .errors import ConfigError, DataError
from .nn_core import Network

VERDICTS = ("normal", "adversarial", "undecided")


def _networks(pool) -> list[Network]:
    return [getattr(m, "network", m) for m in pool]


def _ids(pool) -> list:
    return [getattr(m, "id", i) for i, m in enumerate(pool)]


def label_table(pool, X: np.ndarray) -> np.ndarray:
    """Predicted labels as a ``(len(pool), len(X))`` integer matrix."""
    return np.array([nn_core.predict_label(net, X) for net in _networks(pool)], dtype=np.int64).reshape(
        len(pool), len(X))


# ---------------------------------------------------------------------------
# kill matrix and mutation score


@dataclass(frozen=True, eq=False)
class KillMatrix:
    mutant_ids: list
    test_indices: list
    killed: np.ndarray
    pseudo_equivalent: np.ndarray

    def __post_init__(self):
        killed = np.asarray(self.killed, dtype=bool).reshape(len(self.mutant_ids), len(self.test_indices))
        pe = np.asarray(self.pseudo_equivalent, dtype=bool).reshape(len(self.mutant_ids))
        if np.any(killed[pe]):
            raise DataError("a pseudo-equivalent mutant cannot have kills")
        object.__setattr__(self, "killed", killed)
        object.__setattr__(self, "pseudo_equivalent", pe)

    @property
    def killed_mutants(self) -> np.ndarray:
        return self.killed.any(axis=1)

    def to_dict(self) -> dict:
        """JSON form; each kill row is a base64 bitset (numpy ``packbits``, big-endian bit order)."""
        return {
            "mutant_ids": list(self.mutant_ids),
            "test_indices": [int(t) for t in self.test_indices],
            "rows": [base64.b64encode(np.packbits(row).tobytes()).decode("ascii") for row in self.killed],
            "pseudo_equivalent": [bool(p) for p in self.pseudo_equivalent],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KillMatrix":
        n = len(d["test_indices"])
        rows = [np.unpackbits(np.frombuffer(base64.b64decode(r), dtype=np.uint8))[:n].astype(bool)
                for r in d["rows"]]
        killed = np.array(rows, dtype=bool).reshape(len(d["mutant_ids"]), n)
        return cls(list(d["mutant_ids"]), list(d["test_indices"]), killed, d["pseudo_equivalent"])


def kill_matrix(original: Network, pool, data: Dataset, split: str = "test") -> KillMatrix:
    """Kill outcomes of every mutant on every sample of ``split``.

    A mutant is flagged pseudo-equivalent when it agrees with the original
    on every sample of the split, misclassified ones included.
    """
    if len(pool) == 0:
        raise DataError("mutant pool is empty")
    idx = data.indices(split)
    if len(idx) == 0:
        raise DataError(f"{split} split is empty")
    X, y = data.features[idx], data.labels[idx]
    ref = nn_core.predict_label(original, X)
    labels = label_table(pool, X)
    differs = labels != ref[None, :]
    killed = differs & (ref == y)[None, :]
    return KillMatrix(_ids(pool), idx.tolist(), killed, ~differs.any(axis=1))


def mutation_score(km: KillMatrix, exclude_pseudo_equivalent: bool = False) -> float:
    killed = km.killed_mutants
    denom = len(killed)
    if exclude_pseudo_equivalent:
        denom -= int(km.pseudo_equivalent.sum())
    if denom <= 0:
        raise DataError("no scorable mutants")
    return int(killed.sum()) / denom


# ---------------------------------------------------------------------------
# label change rate


@dataclass(frozen=True)
class LcrReport:
    sample_id: int
    lcr: float
    mutants_evaluated: int
    verdict: str
    reference_label: int
    label_changes: int = 0
    forced: bool = False
    llr: float = 0.0

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "lcr": self.lcr,
            "mutants_evaluated": self.mutants_evaluated,
            "label_changes": self.label_changes,
            "verdict": self.verdict,
            "forced": self.forced,
            "reference_label": self.reference_label,
            "llr": self.llr,
        }


def lcr(sample, original: Network, pool) -> float:
    if len(pool) == 0:
        raise DataError("mutant pool is empty")
    ref = nn_core.predict_label(original, sample)
    changes = sum(nn_core.predict_label(net, sample) != ref for net in _networks(pool))
    return changes / len(pool)


def lcr_batch(samples, original: Network, pool) -> np.ndarray:
    """LCR of every row of ``samples`` against the whole pool."""
    if len(pool) == 0:
        raise DataError("mutant pool is empty")
    X = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    ref = nn_core.predict_label(original, X)
    return (label_table(pool, X) != ref[None, :]).mean(axis=0)


# ---------------------------------------------------------------------------
# sequential detection


@dataclass(frozen=True)
class SprtConfig:
    p0: float
    p1: float
    alpha: float = 0.05
    beta: float = 0.05
    max_mutants: int = 200

    def __post_init__(self):
        if not 0.0 < self.p0 < self.p1 < 1.0:
            raise ConfigError(f"need 0 < p0 < p1 < 1, got p0={self.p0}, p1={self.p1}")
        if not (0.0 < self.alpha < 0.5 and 0.0 < self.beta < 0.5):
            raise ConfigError("alpha and beta must lie in (0, 0.5)")
        if self.max_mutants < 1:
            raise ConfigError("max_mutants must be at least 1")

    @property
    def upper(self) -> float:
        return math.log((1.0 - self.beta) / self.alpha)

    @property
    def lower(self) -> float:
        return math.log(self.beta / (1.0 - self.alpha))

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.p0 + self.p1)

    def llr(self, changes: int, evaluated: int) -> float:
        return (changes * math.log(self.p1 / self.p0)
                + (evaluated - changes) * math.log((1.0 - self.p1) / (1.0 - self.p0)))

    def to_dict(self) -> dict:
        return {"p0": self.p0, "p1": self.p1, "alpha": self.alpha, "beta": self.beta,
                "max_mutants": self.max_mutants}


def calibrate(normal_samples, original: Network, pool, quantile: float = 0.95, ratio: float = 3.0,
              alpha: float = 0.05, beta: float = 0.05, max_mutants: int | None = None) -> SprtConfig:
    """Suggest SPRT hypotheses from the LCR distribution of known-normal inputs.

    ``p0`` is the ``quantile`` of normal LCRs, floored at ``1/len(pool)``;
    ``p1 = ratio * p0``, capped halfway between ``p0`` and 1.
    """
    X = np.atleast_2d(np.asarray(normal_samples, dtype=np.float64))
    if len(X) < 30:
        raise DataError("insufficient calibration data: need at least 30 normal samples")
    if not ratio > 1.0:
        raise ConfigError("ratio must exceed 1")
    if not 0.0 <= quantile <= 1.0:
        raise ConfigError("quantile must lie in [0, 1]")
    rates = lcr_batch(X, original, pool)
    p0 = max(float(np.quantile(rates, quantile)), 1.0 / len(pool))
    p0 = min(p0, 0.5)
    p1 = min(ratio * p0, 0.5 * (1.0 + p0))
    return SprtConfig(p0, p1, alpha, beta, len(pool) if max_mutants is None else max_mutants)


def detect(sample, original: Network, mutant_stream: Iterable, cfg: SprtConfig,
           sample_id: int = 0) -> LcrReport:
    """Sequentially classify ``sample`` as normal or adversarial.

    Mutants are drawn from ``mutant_stream`` one at a time until the
    log-likelihood ratio crosses a Wald boundary or ``cfg.max_mutants`` have
    been used. At the budget the observed rate is compared with the midpoint
    of ``p0`` and ``p1`` and the report is marked ``forced``. A stream that
    runs dry first yields ``undecided``.
    """
    x = np.asarray(sample, dtype=np.float64)
    ref = nn_core.predict_label(original, x)
    step_change = math.log(cfg.p1 / cfg.p0)
    step_same = math.log((1.0 - cfg.p1) / (1.0 - cfg.p0))
    k = n = 0
    llr = 0.0
    for m in mutant_stream:
        if n >= cfg.max_mutants:
            break
        changed = nn_core.predict_label(getattr(m, "network", m), x) != ref
        n += 1
        k += changed
        llr = k * step_change + (n - k) * step_same
        if llr >= cfg.upper:
            return LcrReport(sample_id, k / n, n, "adversarial", ref, k, False, llr)
        if llr <= cfg.lower:
            return LcrReport(sample_id, k / n, n, "normal", ref, k, False, llr)
    if n < cfg.max_mutants:
        return LcrReport(sample_id, k / n if n else 0.0, n, "undecided", ref, k, False, llr)
    verdict = "adversarial" if k / n >= cfg.midpoint else "normal"
    return LcrReport(sample_id, k / n, n, verdict, ref, k, True, llr)


def threshold_decision(rate: float, cfg: SprtConfig) -> str:
    """Fixed-budget rule applied to a full-pool LCR."""
    return "adversarial" if rate >= cfg.midpoint else "normal"


def sprt_steps_all_changes(cfg: SprtConfig) -> int:
    """Mutants needed to accept H1 when every mutant changes the label."""
    return math.ceil(cfg.upper / math.log(cfg.p1 / cfg.p0))


# ---------------------------------------------------------------------------
# adversarial inputs for evaluation


def fgsm(network: Network, sample, label, epsilon: float, clip: tuple | None = None):
    """One signed-gradient step of size ``epsilon`` on the cross-entropy.

    Works on one sample or a batch. Returns ``(adversarial, zero_grad)``
    where ``zero_grad`` marks inputs with an all-zero gradient, which come
    back unchanged. ``clip`` is a ``(low, high)`` pair of per-feature bounds.
    """
    if epsilon < 0:
        raise ConfigError("epsilon must be non-negative")
    x = np.asarray(sample, dtype=np.float64)
    g = nn_core.input_gradient(network, x, label)
    zero = ~np.any(g != 0, axis=-1)
    adv = x + epsilon * np.sign(g)
    if clip is not None:
        adv = np.clip(adv, clip[0], clip[1])
    if adv.ndim == 2:
        adv[zero] = x[zero]
        return adv, zero
    return (x.copy() if zero else adv), bool(zero)


def confident_correct(network: Network, X: np.ndarray, y: np.ndarray, min_confidence: float = 0.8) -> np.ndarray:
    """Indices the network gets right with top probability at least ``min_confidence``."""
    p = nn_core.forward(network, X)
    return np.flatnonzero((p.argmax(axis=1) == y) & (p.max(axis=1) >= min_confidence))


def flip_rate(network: Network, X: np.ndarray, y: np.ndarray, epsilon: float, clip=None) -> float:
    if len(X) == 0:
        raise DataError("no samples to attack")
    adv, _ = fgsm(network, X, y, epsilon, clip)
    return float(np.mean(nn_core.predict_label(network, adv) != nn_core.predict_label(network, X)))


def select_epsilon(network: Network, data: Dataset, split: str = "val", target: float = 0.7,
                   grid: Sequence[float] | None = None, min_confidence: float = 0.8) -> float:
    """Smallest ``epsilon`` in ``grid`` whose FGSM flip rate on confident samples reaches ``target``."""
    if grid is None:
        grid = np.round(np.arange(0.05, 2.0001, 0.05), 2)
    X, y = data.split(split)
    idx = confident_correct(network, X, y, min_confidence)
    if len(idx) == 0:
        raise DataError(f"no confidently classified samples in the {split} split")
    clip = data.feature_range()
    for eps in grid:
        if flip_rate(network, X[idx], y[idx], float(eps), clip) >= target:
            return float(eps)
    raise DataError(f"no epsilon in the grid reaches a {target:.0%} flip rate")


def auroc(negatives, positives) -> float:
    """Probability a random positive scores above a random negative (ties count half)."""
    neg = np.asarray(negatives, dtype=np.float64)
    pos = np.asarray(positives, dtype=np.float64)
    if len(neg) == 0 or len(pos) == 0:
        raise DataError("auroc needs both classes")
    greater = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((greater + 0.5 * ties) / (len(pos) * len(neg)))
