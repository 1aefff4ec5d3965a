"""Campaign configuration: defaults, JSON file loading, and overrides.

A campaign file is a JSON object with the sections below; anything omitted
takes the default. Section seeds left as ``null`` inherit the top-level
``seed``, so the effective configuration always lists every seed.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .errors import ConfigError

SCHEMA_VERSION = 1

DEFAULTS: dict = {
    "seed": 8,
    "output": "runs/reference",
    "dataset": {
        "kind": "two_moons",
        "n": 400,
        "noise": 0.05,
        "path": None,
        "label_column": "label",
        "split_fractions": [0.6, 0.2, 0.2],
        "seed": None,
    },
    "training": {
        "hidden_sizes": [32, 32],
        "activations": ["relu", "relu"],
        "learning_rate": 0.1,
        "epochs": 200,
        "batch_size": 16,
        "init_scale": 0.5,
        "seed": None,
    },
    "mutation": {
        "operators": [
            {"kind": "GF", "gamma": 0.05, "sigma": 1.0},
            {"kind": "WS", "gamma": 0.05},
            {"kind": "NS", "gamma": 0.05},
            {"kind": "NAI", "gamma": 0.05},
        ],
        "count": 200,
        "quality_ratio": 0.9,
        "gate_split": "val",
        "max_attempts": 2000,
        "base_seed": None,
        "data_mutations": [
            {"kind": "label_error", "rate": 0.1},
            {"kind": "data_missing", "rate": 0.2},
            {"kind": "data_repetition", "rate": 0.2},
            {"kind": "noise_perturbation", "rate": 0.5, "sigma": 0.1},
            {"kind": "data_shuffle", "rate": 1.0},
        ],
        "program_mutations": [
            {"kind": "layer_removal", "layer_index": 1},
            {"kind": "layer_addition", "layer_index": 0, "size": 8, "activation": "relu"},
            {"kind": "activation_change", "layer_index": 0, "activation": "tanh"},
            {"kind": "init_skew", "factor": 4.0},
            {"kind": "learning_rate_scale", "factor": 0.25},
        ],
    },
    "score": {
        "split": "test",
        "exclude_pseudo_equivalent": False,
    },
    "detection": {
        "calibration_split": "val",
        "quantile": 0.95,
        "ratio": 3.0,
        "alpha": 0.05,
        "beta": 0.05,
        "p0": None,
        "p1": None,
        "max_mutants": None,
        "epsilon": "sweep",
        "flip_target": 0.7,
        "min_confidence": 0.8,
        "sample_split": "test",
    },
    "pmt": {
        "enable": True,
        "holdout": 0.5,
        "epochs": 2000,
        "use_accuracy_drop": True,
        "seed": None,
    },
}

_SEEDED = ("dataset", "training", "pmt")


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in over.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_assignment(cfg: dict, assignment: str) -> dict:
    """Apply one ``section.key=value`` override (value parsed as JSON when possible)."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    dotted, raw = assignment.split("=", 1)
    keys = dotted.strip().split(".")
    over: dict = {}
    node = over
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = _parse_value(raw)
    return _merge(cfg, over)


def resolve(cfg: dict) -> dict:
    """Fill inherited seeds so the configuration is fully explicit."""
    out = copy.deepcopy(cfg)
    root = out["seed"]
    if not isinstance(root, int) or isinstance(root, bool) or not 0 <= root < 2**64:
        raise ConfigError("seed must be a 64-bit unsigned integer")
    for section in _SEEDED:
        if out[section]["seed"] is None:
            out[section]["seed"] = root
    if out["mutation"]["base_seed"] is None:
        out["mutation"]["base_seed"] = root
    return out


def load_config(path=None, overrides: list[str] | None = None, seed: int | None = None,
                output: str | None = None) -> dict:
    """Defaults, then the file at ``path``, then ``overrides``, then ``seed``/``output`` flags."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} not found")
        try:
            cfg = _merge(cfg, json.loads(p.read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from None
    for assignment in overrides or []:
        cfg = apply_assignment(cfg, assignment)
    if seed is not None:
        cfg["seed"] = seed
        for section in _SEEDED:
            cfg[section]["seed"] = None
        cfg["mutation"]["base_seed"] = None
    if output is not None:
        cfg["output"] = output
    return resolve(cfg)
