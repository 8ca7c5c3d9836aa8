"""
Command-line front end.

    pskd train        --config cfg.json [--out runs] [overrides]
    pskd eval         --model run/model.npz [--model ...] [--config cfg.json] [--split val]
    pskd analyze      RUN_DIR
    pskd sweep-alpha  --config cfg.json --alphas 0.0,0.8 [--seeds 3] [--fixed-alpha]

Config files are JSON. Training keys sit at the top level (see
``TrainConfig``), the dataset lives under "data", e.g.::

    {"method": "pskd", "alpha_T": 0.8, "epochs": 60, "hidden": [64, 64],
     "data": {"kind": "spirals", "K": 3, "n_per_class": 150, "noise": 0.1, "seed": 0}}

A run's manifest.json is itself a valid --config. Exit codes: 0 ok,
1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, metrics
from .data import Dataset, gen_blobs, gen_spirals, load_csv, load_idx, split_train_val
from .errors import PSKDError, ShapeError, TrainingAborted
from .gradients import ExampleHistory, hard_example_report, write_report_csv
from .trainer import TrainConfig, load_model, predict_proba, read_examples_csv, save_model, train

log = logging.getLogger("pskd")

DEFAULT_DATA = {"kind": "spirals", "K": 3, "n_per_class": 150, "noise": 0.1, "seed": 0}
CLI_KEYS = ("data", "bins", "seeds", "kd_teacher")


class UsageError(Exception):
    """Bad command line or config; exit code 2."""


# --- config handling -----------------------------------------------------------

def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise UsageError(f"config {path} must be a JSON object")
    if "config" in doc and isinstance(doc["config"], dict):  # a run manifest
        doc = doc["config"]
    return doc


def parse_bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def apply_overrides(cfg: dict, args) -> dict:
    cfg = dict(cfg)
    for flag, key in (("seed", "seed"), ("method", "method"), ("alpha_T", "alpha_T"), ("epochs", "epochs"),
                      ("teacher", "teacher"), ("per_example_log", "per_example_log"), ("bins", "bins")):
        value = getattr(args, flag, None)
        if value is not None:
            cfg[key] = value
    return cfg


def split_config(cfg: dict) -> tuple[TrainConfig, dict]:
    """TrainConfig plus the CLI-only keys (data, bins, seeds, kd_teacher) with defaults filled."""
    train_keys = {k: v for k, v in cfg.items() if k not in CLI_KEYS}
    try:
        tc = TrainConfig.from_dict(train_keys)
    except PSKDError as exc:
        raise UsageError(f"invalid config: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config value: {exc}") from None
    extra = {"data": dict(cfg.get("data") or DEFAULT_DATA), "bins": int(cfg.get("bins", metrics.DEFAULT_BINS))}
    if "seeds" in cfg:
        extra["seeds"] = [int(s) for s in cfg["seeds"]]
    if cfg.get("kd_teacher"):
        extra["kd_teacher"] = cfg["kd_teacher"]
    return tc, extra


def resolved_config(tc: TrainConfig, extra: dict) -> dict:
    d = tc.to_dict()
    d.update(extra)
    return d


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:12]


def build_dataset(desc: dict) -> Dataset:
    d = dict(desc)
    kind = d.pop("kind", "spirals")
    try:
        if kind == "spirals":
            return gen_spirals(int(d.get("seed", 0)), int(d.get("K", 3)), int(d.get("n_per_class", 150)),
                               float(d.get("noise", 0.1)), float(d.get("turns", 1.0)))
        if kind == "blobs":
            return gen_blobs(int(d.get("seed", 0)), int(d.get("K", 3)), int(d.get("n_per_class", 200)),
                             int(d.get("dim", 2)), float(d.get("spread", 1.0)), float(d.get("center_scale", 3.0)))
        if kind == "csv":
            return load_csv(d["path"], d.get("K"))
        if kind == "idx":
            return load_idx(d["images"], d["labels"], d.get("K"))
    except KeyError as exc:
        raise UsageError(f"data: missing key {exc}") from None
    except PSKDError as exc:
        raise UsageError(f"data: {exc}") from None
    raise UsageError(f"data: unknown kind {kind!r} (spirals, blobs, csv, idx)")


def new_run_dir(base: Path, run_id: str) -> Path:
    """``base/run_id``, or ``base/run_id-N`` if that already exists; never reuses a directory."""
    base.mkdir(parents=True, exist_ok=True)
    candidate, n = base / run_id, 0
    while True:
        try:
            candidate.mkdir()
            return candidate
        except FileExistsError:
            n += 1
            candidate = base / f"{run_id}-{n}"


# --- train ----------------------------------------------------------------------

def run_training(tc: TrainConfig, extra: dict, dataset: Dataset, run_dir: Path | None = None):
    kd_teacher = None
    if tc.method.name == "kd":
        if "kd_teacher" in extra:
            kd_teacher, _ = load_model(extra["kd_teacher"])
        else:
            log.info("training a hard-target teacher for classic KD")
            teacher_cfg = TrainConfig.from_dict({**tc.to_dict(), "method": "hard", "per_example_log": False})
            kd_teacher, th = train(teacher_cfg, dataset)
            if run_dir is not None:
                save_model(run_dir / "teacher_model.npz", kd_teacher, th.standardizer)
    cache_dir = run_dir / "cache" if (run_dir is not None and tc.teacher == "disk"
                                      and tc.method.name == "pskd") else None
    return train(tc, dataset, kd_teacher=kd_teacher, cache_dir=cache_dir)


def cmd_train(args) -> int:
    cfg = apply_overrides(load_config(args.config), args)
    tc, extra = split_config(cfg)
    dataset = build_dataset(extra["data"])
    resolved = resolved_config(tc, extra)
    run_id = time.strftime("%Y%m%d-%H%M%S") + "-" + config_hash(resolved)
    run_dir = new_run_dir(Path(args.out), run_id)
    manifest = {
        "run_id": run_id,
        "config": resolved,
        "dataset": {**extra["data"], "n": dataset.n, "dim": dataset.dim, "n_classes": dataset.n_classes},
        "output_dir": str(run_dir),
        "tool_version": __version__,
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    (run_dir / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True))

    params, history = run_training(tc, extra, dataset, run_dir)

    (run_dir / "history.csv").write_text(history.epochs_csv())
    if tc.per_example_log:
        (run_dir / "examples.csv").write_text(history.examples_csv())
    save_model(run_dir / "model.npz", params, history.standardizer)
    val = dataset.subset(np.searchsorted(dataset.ids, history.val_ids))
    if val.n:
        probs = predict_proba(params, history.standardizer, val.features)
        metrics.write_metrics_csvs(metrics.evaluate(probs, val.labels, val.ids, extra["bins"]), run_dir)
    print(run_dir)
    return 0


# --- eval -----------------------------------------------------------------------

def cmd_eval(args) -> int:
    cfg_path = args.config
    if cfg_path is None:
        guess = Path(args.model[0]).parent / "manifest.json"
        if not guess.exists():
            raise UsageError("no --config given and no manifest.json next to the model")
        cfg_path = guess
    cfg = apply_overrides(load_config(cfg_path), args)
    tc, extra = split_config(cfg)
    dataset = build_dataset(extra["data"])
    if args.split == "all":
        subset = dataset
    else:
        tr, va = split_train_val(dataset, tc.val_fraction, tc.seed)
        subset = va if args.split == "val" else tr
    if subset.n == 0:
        raise UsageError(f"the {args.split} split is empty")
    outputs = []
    for path in args.model:
        try:
            params, std = load_model(path)
        except (OSError, KeyError, ValueError) as exc:
            raise UsageError(f"cannot load model {path}: {exc}") from None
        if params.layer_dims[0] != subset.dim or params.n_classes != subset.n_classes:
            raise UsageError(f"model {path} has dims {params.layer_dims}, data has {subset.dim} features "
                             f"and {subset.n_classes} classes")
        outputs.append(predict_proba(params, std, subset.features))
    probs = metrics.ensemble_predict(outputs)
    report = metrics.evaluate(probs, subset.labels, subset.ids, extra["bins"])
    out = Path(args.out) if args.out else Path(args.model[0]).parent / "eval"
    metrics.write_metrics_csvs(report, out)
    for k, v in report.summary().items():
        print(f"{k}\t{v:.6g}")
    return 0


# --- analyze --------------------------------------------------------------------

def cmd_analyze(args) -> int:
    run_dir = Path(args.run_dir)
    examples = run_dir / "examples.csv"
    history_csv = run_dir / "history.csv"
    if not history_csv.exists():
        raise UsageError(f"{run_dir} has no history.csv; is it a training run directory?")
    if not examples.exists():
        raise UsageError(f"{run_dir} has no per-example history; re-run training with --per-example-log true")
    with open(history_csv, newline="") as f:
        epochs = list(csv.DictReader(f))
    probs, labels, ids = read_examples_csv(examples)
    alphas = np.array([float(r["alpha"]) for r in epochs])
    report = hard_example_report(ExampleHistory(probs, labels, ids, alphas), args.threshold)
    write_report_csv(report, run_dir / "hard_examples.csv")
    with open(run_dir / "curves.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "alpha", "lr", "train_loss", "val_loss"])
        for r in epochs:
            w.writerow([r["epoch"], r["alpha"], r["lr"], r["train_loss"], r["val_loss"]])
    print(f"hard examples: {report.hard_ids.size}, easy: {report.easy_ids.size}, "
          f"gamma increases: {report.violations}")
    return 0


# --- sweep ----------------------------------------------------------------------

SWEEP_METRICS = (("val_top1_error", "val_top1_error"), ("val_ece", "val_ece"),
                 ("val_nll", "val_loss"), ("val_aurc", "val_aurc"))


def run_arm(cfg: dict, alpha_T: float, seed: int, fixed: bool) -> dict:
    """Final-epoch validation metrics for one (alpha_T, seed) PS-KD run."""
    arm = {**cfg, "method": "pskd", "alpha_T": alpha_T, "seed": seed,
           "alpha_schedule": "fixed" if fixed else "linear", "per_example_log": False}
    tc, extra = split_config(arm)
    _, history = run_training(tc, extra, build_dataset(extra["data"]))
    last = history.epochs[-1]
    return {name: last[key] for name, key in SWEEP_METRICS}


def _run_arm_star(job):
    return run_arm(*job)


def sweep(cfg: dict, alphas, seeds, fixed: bool = False, jobs: int = 1) -> list[dict]:
    jobs_list = [(cfg, a, s, fixed) for a in alphas for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            results = list(ex.map(_run_arm_star, jobs_list))
    else:
        results = [run_arm(*j) for j in jobs_list]
    by_key = {(j[1], j[2]): r for j, r in zip(jobs_list, results)}
    rows = []
    for a in alphas:
        row = {"alpha_T": a, "schedule": "fixed" if fixed else "linear", "n_seeds": len(seeds)}
        for name, _ in SWEEP_METRICS:
            vals = np.array([by_key[(a, s)][name] for s in seeds])
            row[f"{name}_mean"] = float(vals.mean())
            row[f"{name}_std"] = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
        rows.append(row)
    return rows


def cmd_sweep_alpha(args) -> int:
    try:
        alphas = [float(a) for a in args.alphas.split(",") if a.strip()]
    except ValueError:
        raise UsageError(f"--alphas must be a comma-separated list of numbers, got {args.alphas!r}") from None
    if len(alphas) < 2:
        raise UsageError("--alphas needs at least two values")
    cfg = apply_overrides(load_config(args.config), args)
    tc, extra = split_config(cfg)  # validates before any run starts
    base_seed = tc.seed
    if args.seeds is not None:
        seeds = [base_seed + i for i in range(args.seeds)]
    else:
        seeds = extra.get("seeds", [base_seed])
    for a in alphas:
        split_config({**cfg, "method": "pskd", "alpha_T": a})
    resolved = resolved_config(tc, extra)
    out_dir = new_run_dir(Path(args.out), "sweep-" + time.strftime("%Y%m%d-%H%M%S") + "-" + config_hash(resolved))
    (out_dir / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True))
    rows = sweep(resolved, alphas, seeds, args.fixed_alpha, args.jobs)
    path = out_dir / "sweep.csv"
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    print(path)
    return 0


# --- entry point ----------------------------------------------------------------

def _shared(p: argparse.ArgumentParser, out_default: str) -> None:
    p.add_argument("--config", help="JSON config file (or a run manifest.json)")
    p.add_argument("--out", default=out_default, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--method", choices=["hard", "ls", "kd", "pskd"])
    p.add_argument("--alpha-T", dest="alpha_T", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--teacher", choices=["snapshot", "disk"])
    p.add_argument("--bins", type=int, help="ECE / reliability bins (default 15)")
    p.add_argument("--per-example-log", dest="per_example_log", type=parse_bool, metavar="BOOL")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pskd", description=__doc__.split("\n\n")[0].strip())
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model")
    _shared(p, "runs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate one model or an ensemble")
    _shared(p, None)
    p.add_argument("--model", action="append", required=True, help="model file; repeat for an ensemble")
    p.add_argument("--split", choices=["val", "train", "all"], default="val")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="hard-example and curve CSVs for a run")
    p.add_argument("run_dir")
    p.add_argument("--threshold", type=float, default=0.5,
                   help="hard = correct in fewer than this fraction of epochs")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("sweep-alpha", help="compare PS-KD across alpha_T values")
    _shared(p, "runs")
    p.add_argument("--alphas", required=True, help="comma-separated alpha_T values")
    p.add_argument("--seeds", type=int, help="number of seeds, starting at --seed")
    p.add_argument("--fixed-alpha", action="store_true", help="hold alpha_t at alpha_T for every epoch")
    p.add_argument("--jobs", type=int, default=1, help="parallel processes")
    p.set_defaults(func=cmd_sweep_alpha)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingAborted, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except PSKDError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
