"""Command-line driver: ``dnnmut <command> [options]``.

Commands read and write plain files under the output directory::

    dataset.json  model.json  metrics.json     train
    pool/                                      mutate-model (alias: mutate)
    pool_data/  pool_source/                   mutate-data, mutate-source
    score.json                                 score
    samples.csv  detection.json                detect
    features.csv  predictions.csv  pmt_model.json  pmt.json    pmt
    report.json                                report

Exit codes: 0 success, 2 configuration error, 3 data or input error,
4 budget exhausted, training diverged or verification mismatch.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis, data as data_mod, nn_core, pmt
from .config import SCHEMA_VERSION, load_config
from .data import DataMutationSpec, Dataset
from .errors import ConfigError, DataError, DnnMutError, PoolBudgetError
from .mutation_engine import (ModelMutationSpec, MutantRecord, PoolStats, ProgramMutationSpec,
                              build_source_mutant, generate_pool, load_pool, save_pool)
from .nn_core import TrainingDivergedError, TrainingSpec

log = logging.getLogger("dnnmut")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_BUDGET = 0, 2, 3, 4


class VerificationError(DnnMutError):
    """A brute-force oracle disagreed with the fast path."""


# ---------------------------------------------------------------------------
# helpers


def write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=1, allow_nan=False) + "\n", encoding="utf-8")


def read_json(path: Path) -> dict:
    if not path.exists():
        raise DataError(f"{path} not found")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None


def envelope(cfg: dict, command: str, **body) -> dict:
    return {"schema_version": SCHEMA_VERSION, "command": command, "config": cfg, **body}


@contextlib.contextmanager
def locked(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise DataError(f"{out} is locked by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out
    finally:
        lock.unlink(missing_ok=True)


def build_dataset(cfg: dict) -> Dataset:
    ds = cfg["dataset"]
    if ds["path"]:
        return data_mod.load_csv(ds["path"], ds["label_column"], ds["split_fractions"], ds["seed"])
    return data_mod.generate_synthetic(ds["kind"], ds["n"], ds["noise"], ds["seed"], ds["split_fractions"])


def training_spec(cfg: dict) -> TrainingSpec:
    t = cfg["training"]
    try:
        return TrainingSpec(tuple(t["hidden_sizes"]), tuple(t["activations"]), t["learning_rate"],
                            t["epochs"], t["batch_size"], t["seed"], t["init_scale"])
    except TypeError as exc:
        raise ConfigError(f"training section: {exc}") from None


def op_mix(cfg: dict) -> list[ModelMutationSpec]:
    try:
        return [ModelMutationSpec(o["kind"], o["gamma"], o.get("sigma")) for o in cfg["mutation"]["operators"]]
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"mutation.operators: {exc}") from None


def _inputs(args, out: Path):
    model_path = Path(args.model) if getattr(args, "model", None) else out / "model.json"
    data_path = Path(args.data) if getattr(args, "data", None) else out / "dataset.json"
    if not model_path.exists():
        raise DataError(f"{model_path} not found; run `dnnmut train` first")
    if not data_path.exists():
        raise DataError(f"{data_path} not found; run `dnnmut train` first")
    return nn_core.load_network(model_path), data_mod.load_dataset(data_path)


def _pool_dir(args, out: Path) -> Path:
    return Path(args.pool) if getattr(args, "pool", None) else out / "pool"


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg: dict, args, out: Path) -> int:
    dataset = build_dataset(cfg)
    spec = training_spec(cfg)
    net = nn_core.train(spec, dataset)
    data_mod.save_dataset(dataset, out / "dataset.json")
    nn_core.save_network(net, out / "model.json")
    sizes = dataset.split_sizes()
    acc = {s: nn_core.accuracy(net, dataset, s) for s in data_mod.SPLITS if sizes[s]}
    write_json(out / "metrics.json", envelope(cfg, "train", split_sizes=sizes, accuracy=acc))
    print("accuracy " + " ".join(f"{k}={v:.4f}" for k, v in acc.items()))
    return EXIT_OK


def _print_stats(stats: dict) -> None:
    for kind, s in stats.get("per_operator", {}).items():
        print(f"{kind:>20}: attempted {s['attempted']:4d} retained {s['retained']:4d} "
              f"rejection rate {s['rejection_rate']:.3f}")


def cmd_mutate_model(cfg: dict, args, out: Path) -> int:
    net, dataset = _inputs(args, out)
    m = cfg["mutation"]
    pool_dir = _pool_dir(args, out)
    try:
        pool, stats = generate_pool(net, dataset, op_mix(cfg), m["count"], m["quality_ratio"], m["gate_split"],
                                    base_seed=m["base_seed"], max_attempts=m["max_attempts"],
                                    workers=args.threads)
    except PoolBudgetError as exc:
        save_pool(pool_dir, exc.pool, exc.stats, cfg)
        _print_stats(exc.stats.to_dict())
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    save_pool(pool_dir, pool, stats, cfg)
    _print_stats(stats.to_dict())
    print(f"retained {len(pool)} mutants in {stats.attempts} attempts -> {pool_dir}")
    return EXIT_OK


def _source_campaign(cfg: dict, args, out: Path, key: str, parse, dirname: str) -> int:
    net, dataset = _inputs(args, out)
    m = cfg["mutation"]
    base = training_spec(cfg)
    original_acc = nn_core.accuracy(net, dataset, m["gate_split"])
    stats = PoolStats(original_acc, m["quality_ratio"] * original_acc)
    records = []
    for i, entry in enumerate(m[key]):
        try:
            mutation = parse(dict(entry, seed=entry.get("seed", m["base_seed"] + i)))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"mutation.{key}[{i}]: {exc}") from None
        rec = build_source_mutant(base, dataset, mutation, gate_split=m["gate_split"], mutant_id=i,
                                  original_accuracy=original_acc, quality_ratio=m["quality_ratio"])
        stats.record(rec)
        records.append(rec)
        print(f"mutant {i} {mutation.kind}: gate accuracy {rec.accuracy:.4f} "
              f"{'retained' if rec.retained else 'rejected'}")
    save_pool(out / dirname, records, stats, cfg)
    return EXIT_OK


def cmd_mutate_data(cfg, args, out):
    return _source_campaign(cfg, args, out, "data_mutations",
                            lambda d: DataMutationSpec(d["kind"], d["rate"], d.get("sigma", 0.0), d["seed"]),
                            "pool_data")


def cmd_mutate_source(cfg, args, out):
    return _source_campaign(cfg, args, out, "program_mutations",
                            lambda d: ProgramMutationSpec(d["kind"], d.get("layer_index"), d.get("activation"),
                                                          d.get("factor"), d.get("size")),
                            "pool_source")


def brute_force_kills(original, pool, dataset: Dataset, split: str) -> np.ndarray:
    """Double loop over (mutant, sample) with per-sample predictions."""
    idx = dataset.indices(split)
    killed = np.zeros((len(pool), len(idx)), dtype=bool)
    for mi, rec in enumerate(pool):
        for ti, t in enumerate(idx):
            x, y = dataset.features[t], dataset.labels[t]
            ref = nn_core.predict_label(original, x)
            killed[mi, ti] = ref == y and nn_core.predict_label(rec.network, x) != ref
    return killed


def cmd_score(cfg: dict, args, out: Path) -> int:
    net, dataset = _inputs(args, out)
    pool, _ = load_pool(_pool_dir(args, out))
    split = cfg["score"]["split"]
    km = analysis.kill_matrix(net, pool, dataset, split)
    score = analysis.mutation_score(km, False)
    try:
        score_excl = analysis.mutation_score(km, True)
    except DataError:
        score_excl = None
    verified = None
    if args.verify:
        oracle = brute_force_kills(net, pool, dataset, split)
        oracle_score = float(oracle.any(axis=1).sum()) / len(pool)
        verified = bool(np.array_equal(oracle, km.killed) and oracle_score == score)
        if not verified:
            raise VerificationError("kill matrix disagrees with the brute-force oracle")
    doc = envelope(cfg, "score", split=split, mutants=len(pool), tests=len(km.test_indices),
                   killed_mutants=int(km.killed_mutants.sum()),
                   pseudo_equivalent=int(km.pseudo_equivalent.sum()),
                   mutation_score=score, mutation_score_excluding_equivalent=score_excl,
                   verified=verified, kill_matrix=km.to_dict())
    write_json(out / "score.json", doc)
    print(f"mutation score {score:.4f} ({int(km.killed_mutants.sum())}/{len(pool)} killed)")
    if cfg["score"]["exclude_pseudo_equivalent"] and score_excl is None:
        print("error: no scorable mutants", file=sys.stderr)
        return EXIT_DATA
    if score_excl is not None:
        print(f"excluding {int(km.pseudo_equivalent.sum())} pseudo-equivalent: {score_excl:.4f}")
    if verified:
        print("verified against brute-force oracle")
    return EXIT_OK


def read_samples(path: Path, dim: int) -> tuple[np.ndarray, list | None]:
    """Samples CSV: columns ``x0..x{d-1}`` and an optional ``kind`` column (clean/adversarial)."""
    if not path.exists():
        raise DataError(f"{path} not found")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise DataError(f"{path}: no samples")
    header = rows[0]
    cols = [f"x{j}" for j in range(dim)]
    missing = [c for c in cols if c not in header]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    ci = [header.index(c) for c in cols]
    ki = header.index("kind") if "kind" in header else None
    X, kinds = [], []
    for r, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            X.append([float(row[i]) for i in ci])
        except (ValueError, IndexError):
            raise DataError(f"{path}: row {r} is not numeric") from None
        if ki is not None:
            kinds.append(row[ki])
    if not X:
        raise DataError(f"{path}: no samples")
    return np.array(X), (kinds if ki is not None else None)


def make_samples(net, dataset: Dataset, det: dict) -> tuple[np.ndarray, list, float]:
    """Clean samples of ``sample_split`` followed by FGSM versions of its confident ones."""
    if det["epsilon"] == "sweep":
        eps = analysis.select_epsilon(net, dataset, "val", det["flip_target"], min_confidence=det["min_confidence"])
    else:
        eps = float(det["epsilon"])
    X, y = dataset.split(det["sample_split"])
    cc = analysis.confident_correct(net, X, y, det["min_confidence"])
    adv, _ = analysis.fgsm(net, X[cc], y[cc], eps, dataset.feature_range())
    return np.vstack([X, adv]), ["clean"] * len(X) + ["adversarial"] * len(adv), eps


def sprt_config(cfg: dict, net, pool, dataset: Dataset) -> tuple[analysis.SprtConfig, str]:
    det = cfg["detection"]
    max_m = det["max_mutants"] or len(pool)
    if det["p0"] is not None and det["p1"] is not None:
        return analysis.SprtConfig(det["p0"], det["p1"], det["alpha"], det["beta"], max_m), "config"
    Xc, _ = dataset.split(det["calibration_split"])
    c = analysis.calibrate(Xc, net, pool, det["quantile"], det["ratio"], det["alpha"], det["beta"], max_m)
    return c, f"calibrated on {det['calibration_split']} split"


def cmd_detect(cfg: dict, args, out: Path) -> int:
    net, dataset = _inputs(args, out)
    pool, _ = load_pool(_pool_dir(args, out))
    det = cfg["detection"]
    eps = None
    if args.samples:
        X, kinds = read_samples(Path(args.samples), net.input_dim)
    else:
        X, kinds, eps = make_samples(net, dataset, det)
        data_mod.save_csv(out / "samples.csv", X, extra={"kind": kinds})
    sprt, source = sprt_config(cfg, net, pool, dataset)
    reports = [analysis.detect(x, net, pool, sprt, i) for i, x in enumerate(X)]
    flagged = np.array([r.verdict == "adversarial" for r in reports])
    summary = {
        "samples": len(reports),
        "adversarial_rate": float(flagged.mean()),
        "undecided": sum(r.verdict == "undecided" for r in reports),
        "forced": sum(r.forced for r in reports),
        "mean_mutants_evaluated": float(np.mean([r.mutants_evaluated for r in reports])),
        "pool_size": len(pool),
    }
    if kinds is not None:
        is_adv = np.array([k == "adversarial" for k in kinds])
        summary["tpr"] = float(flagged[is_adv].mean()) if is_adv.any() else None
        summary["fpr"] = float(flagged[~is_adv].mean()) if (~is_adv).any() else None
    if args.verify:
        full = analysis.lcr_batch(X, net, pool)
        fixed = [analysis.threshold_decision(v, sprt) for v in full]
        summary["full_pool_agreement"] = float(np.mean([r.verdict == f for r, f in zip(reports, fixed)]))
    rows = []
    for r in reports:
        row = r.to_dict()
        if kinds is not None:
            row["kind"] = kinds[r.sample_id]
        rows.append(row)
    write_json(out / "detection.json", envelope(cfg, "detect", epsilon=eps, sprt=sprt.to_dict(),
                                                sprt_source=source, summary=summary, reports=rows))
    print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in summary.items()))
    return EXIT_OK


def cmd_pmt(cfg: dict, args, out: Path) -> int:
    net, dataset = _inputs(args, out)
    pool, _ = load_pool(_pool_dir(args, out))
    p = cfg["pmt"]
    if not p["enable"]:
        print("pmt disabled in config")
        return EXIT_OK
    if len(pool) < pmt.MIN_MUTANTS:
        print(f"error: insufficient mutants ({len(pool)} < {pmt.MIN_MUTANTS})", file=sys.stderr)
        return EXIT_CONFIG
    kills_path = Path(args.kills) if args.kills else out / "score.json"
    km = analysis.KillMatrix.from_dict(read_json(kills_path)["kill_matrix"])
    ids = [rec.id for rec in pool]
    if list(km.mutant_ids) != ids:
        raise DataError("kill report does not match the pool archive")
    killed = km.killed_mutants
    baseline = nn_core.accuracy(net, dataset, cfg["mutation"]["gate_split"])
    feats = [pmt.extract_features(rec, net, baseline) for rec in pool]
    X = pmt.feature_matrix(feats, p["use_accuracy_drop"])
    train_idx, held = pmt.split_holdout(len(pool), p["holdout"], p["seed"])
    model = pmt.train_predictor(X[train_idx], killed[train_idx], p["seed"], p["epochs"])
    prob, pred = pmt.predict_many(model, X)
    metrics = pmt.evaluate_pmt(pred[held], killed[held], len(pool), len(train_idx) / len(pool))
    shuffled = pmt.permuted_labels(killed, p["seed"])
    control_model = pmt.train_predictor(X[train_idx], shuffled[train_idx], p["seed"], p["epochs"])
    _, control_pred = pmt.predict_many(control_model, X[held])
    control = pmt.evaluate_pmt(control_pred, shuffled[held])
    pmt.write_feature_csv(out / "features.csv", feats, killed)
    pmt.write_feature_csv(out / "predictions.csv", [feats[i] for i in held], killed[held], prob[held], pred[held])
    pmt.save_model(model, out / "pmt_model.json")
    doc = envelope(cfg, "pmt", features=list(pmt.feature_names(p["use_accuracy_drop"])),
                   train_mutants=len(train_idx), heldout_mutants=len(held), metrics=metrics,
                   delta_over_baseline=metrics["accuracy"] - metrics["baseline_accuracy"],
                   permutation_control=control, uses_gate_accuracy=p["use_accuracy_drop"])
    write_json(out / "pmt.json", doc)
    print(f"held-out accuracy {metrics['accuracy']:.4f} vs majority baseline {metrics['baseline_accuracy']:.4f} "
          f"(delta {doc['delta_over_baseline']:+.4f}); permutation control {control['accuracy']:.4f}")
    return EXIT_OK


def cmd_report(cfg: dict, args, out: Path) -> int:
    parts = {}
    for name, keys in [("metrics.json", ("accuracy", "split_sizes")),
                       ("score.json", ("mutation_score", "mutation_score_excluding_equivalent",
                                       "killed_mutants", "pseudo_equivalent", "verified")),
                       ("detection.json", ("epsilon", "sprt", "summary")),
                       ("pmt.json", ("metrics", "delta_over_baseline", "permutation_control"))]:
        path = out / name
        if path.exists():
            doc = read_json(path)
            parts[name.removesuffix(".json")] = {k: doc.get(k) for k in keys}
    pool_json = _pool_dir(args, out) / "pool.json"
    if pool_json.exists():
        parts["pool"] = read_json(pool_json)["stats"]
        parts["pool"].pop("rejected", None)
    if not parts:
        raise DataError(f"nothing to report in {out}")
    write_json(out / "report.json", envelope(cfg, "report", sections=parts))
    print(json.dumps(parts, indent=1))
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "mutate-model": cmd_mutate_model,
    "mutate": cmd_mutate_model,
    "mutate-data": cmd_mutate_data,
    "mutate-source": cmd_mutate_source,
    "score": cmd_score,
    "detect": cmd_detect,
    "pmt": cmd_pmt,
    "report": cmd_report,
}


def _add_common(p: argparse.ArgumentParser, suppress: bool) -> None:
    # subcommand copies use SUPPRESS so flags given before the command survive
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--config", default=d(None), help="campaign JSON file")
    p.add_argument("--seed", type=int, default=d(None), help="root seed; replaces every section seed")
    p.add_argument("--out", default=d(None), help="output directory")
    p.add_argument("--threads", type=int, default=d(1), help="workers for pool generation")
    p.add_argument("--verify", action="store_true", default=d(False),
                   help="cross-check results with brute-force oracles")
    p.add_argument("--set", action="append", default=d([]), metavar="KEY=VALUE",
                   help="override a config key, e.g. mutation.count=50")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dnnmut", description="Mutation testing for small feedforward networks.")
    _add_common(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        _add_common(p, suppress=True)
        if name != "train":
            p.add_argument("--model", help="model file (default: <out>/model.json)")
            p.add_argument("--data", help="dataset archive (default: <out>/dataset.json)")
        if name in ("score", "detect", "pmt", "report", "mutate", "mutate-model"):
            p.add_argument("--pool", help="pool archive directory (default: <out>/pool)")
        if name == "detect":
            p.add_argument("--samples", help="samples CSV (default: generate clean + FGSM samples)")
        if name == "pmt":
            p.add_argument("--kills", help="kill report (default: <out>/score.json)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.set, args.seed, args.out)
        out = Path(cfg["output"])
        with locked(out):
            return COMMANDS[args.command](cfg, args, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PoolBudgetError, TrainingDivergedError, VerificationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
