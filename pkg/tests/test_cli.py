import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from pskd.cli import build_dataset, config_hash, main, run_training, split_config, sweep
from pskd.data import gen_blobs, split_train_val
from pskd.metrics import ensemble_predict, evaluate, read_summary_csv
from pskd.trainer import load_model, predict_proba

BLOBS = {"kind": "blobs", "K": 3, "n_per_class": 40, "seed": 1}
MINIMAL = {"method": "hard", "epochs": 5, "hidden": [16], "batch_size": 32, "data": BLOBS}


def write_config(tmp_path, cfg=MINIMAL, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def run_train(tmp_path, capsys, *extra, cfg=MINIMAL):
    code = main(["train", "--config", str(write_config(tmp_path, cfg)), "--out", str(tmp_path / "runs"), *extra])
    assert code == 0
    return Path(capsys.readouterr().out.strip().splitlines()[-1])


def read_rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_train_minimal(tmp_path, capsys):
    run = run_train(tmp_path, capsys)
    assert len(read_rows(run / "history.csv")) == 5
    for name in ("manifest.json", "config.json", "model.npz", "summary.csv", "reliability.csv",
                 "risk_coverage.csv"):
        assert (run / name).exists(), name
    manifest = json.loads((run / "manifest.json").read_text())
    assert set(manifest) >= {"run_id", "config", "dataset", "output_dir", "tool_version"}
    assert manifest["run_id"].endswith(config_hash(manifest["config"]))
    assert not (run / "examples.csv").exists()


def test_alpha_override_reaches_manifest(tmp_path, capsys):
    run = run_train(tmp_path, capsys, "--method", "pskd", "--alpha-T", "0.8")
    config = json.loads((run / "manifest.json").read_text())["config"]
    assert config["alpha_T"] == 0.8 and config["method"] == "pskd"


def test_config_hash_ignores_key_order():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})


def test_runs_never_overwrite_and_are_deterministic(tmp_path, capsys):
    first = run_train(tmp_path, capsys)
    second = run_train(tmp_path, capsys)
    assert first != second
    assert (first / "history.csv").read_bytes() == (second / "history.csv").read_bytes()


def test_rerun_from_manifest_alone(tmp_path, capsys):
    run = run_train(tmp_path, capsys, "--method", "pskd", "--per-example-log", "true")
    assert main(["train", "--config", str(run / "manifest.json"), "--out", str(tmp_path / "again")]) == 0
    rerun = Path(capsys.readouterr().out.strip())
    for name in ("history.csv", "examples.csv", "summary.csv"):
        assert (run / name).read_bytes() == (rerun / name).read_bytes()


def test_invalid_config_exits_2(tmp_path, capsys):
    bad = write_config(tmp_path, {**MINIMAL, "momentum": 1.5})
    assert main(["train", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "momentum" in capsys.readouterr().err
    unknown = write_config(tmp_path, {**MINIMAL, "colour": "red"}, "u.json")
    assert main(["train", "--config", str(unknown), "--out", str(tmp_path)]) == 2
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["train", "--method", "mixup"])
    assert exc.value.code == 2


def test_runtime_abort_exits_1(tmp_path, capsys):
    cfg = {**MINIMAL, "lr": 1e100, "momentum": 0.0, "weight_decay": 0.0}
    assert main(["train", "--config", str(write_config(tmp_path, cfg)), "--out", str(tmp_path)]) == 1
    assert "non-finite" in capsys.readouterr().err


def test_eval_matches_final_epoch(tmp_path, capsys):
    run = run_train(tmp_path, capsys)
    assert main(["eval", "--model", str(run / "model.npz")]) == 0
    summary = read_summary_csv(run / "eval" / "summary.csv")
    last = read_rows(run / "history.csv")[-1]
    assert summary["nll"] == float(last["val_loss"])
    assert summary["ece"] == float(last["val_ece"])
    assert summary["aurc"] == float(last["val_aurc"])
    assert summary["top1_error"] == float(last["val_top1_error"])


def test_eval_bins_and_ensemble(tmp_path, capsys):
    a = run_train(tmp_path, capsys)
    b = run_train(tmp_path, capsys, "--seed", "9")
    out = tmp_path / "ens"
    assert main(["eval", "--model", str(a / "model.npz"), "--model", str(b / "model.npz"),
                 "--config", str(a / "manifest.json"), "--bins", "10", "--out", str(out)]) == 0
    assert len(read_rows(out / "reliability.csv")) == 10
    single = read_summary_csv(a / "summary.csv")
    ens = read_summary_csv(out / "summary.csv")
    assert ens != single


def test_eval_ensemble_equals_manual_average(tmp_path, capsys):
    runs = [run_train(tmp_path, capsys, "--seed", str(s)) for s in (0, 1)]
    out = tmp_path / "ens"
    assert main(["eval", "--model", str(runs[0] / "model.npz"), "--model", str(runs[1] / "model.npz"),
                 "--out", str(out)]) == 0
    _, va = split_train_val(gen_blobs(1, 3, 40), 0.1, 0)
    probs = ensemble_predict([predict_proba(*load_model(r / "model.npz"), va.features) for r in runs])
    assert read_summary_csv(out / "summary.csv") == evaluate(probs, va.labels, va.ids).summary()


def test_eval_dimension_mismatch_exits_2(tmp_path, capsys):
    run = run_train(tmp_path, capsys)
    other = write_config(tmp_path, {**MINIMAL, "data": {**BLOBS, "dim": 5}}, "o.json")
    assert main(["eval", "--model", str(run / "model.npz"), "--config", str(other)]) == 2
    assert "dims" in capsys.readouterr().err


def test_analyze_requires_per_example_log(tmp_path, capsys):
    run = run_train(tmp_path, capsys)
    assert main(["analyze", str(run)]) == 2
    assert "--per-example-log" in capsys.readouterr().err


def test_analyze_spirals_hard_group_has_larger_factor(tmp_path, capsys):
    cfg = {"method": "pskd", "alpha_T": 0.8, "epochs": 60, "hidden": [64, 64], "batch_size": 16,
           "weight_decay": 0.0, "per_example_log": True,
           "data": {"kind": "spirals", "K": 3, "n_per_class": 150, "noise": 0.1, "seed": 100}}
    run = run_train(tmp_path, capsys, cfg=cfg)
    assert main(["analyze", str(run)]) == 0
    rows = read_rows(run / "hard_examples.csv")
    assert list(rows[0]) == ["epoch", "group", "mean_gt_prob", "mean_max_prob", "mean_rescaling_factor",
                             "n_examples"]
    final = {r["group"]: float(r["mean_rescaling_factor"]) for r in rows if int(r["epoch"]) == 60}
    assert final["hard"] > final["easy"]
    curves = read_rows(run / "curves.csv")
    assert len(curves) == 60 and float(curves[-1]["alpha"]) == 0.8


def test_sweep_rows_and_reduction(tmp_path, capsys):
    cfg = write_config(tmp_path, {**MINIMAL, "method": "pskd"})
    assert main(["sweep-alpha", "--config", str(cfg), "--alphas", "0.0,0.8", "--seeds", "3",
                 "--out", str(tmp_path / "sw")]) == 0
    rows = read_rows(Path(capsys.readouterr().out.strip()))
    assert [float(r["alpha_T"]) for r in rows] == [0.0, 0.8]
    assert all(r["n_seeds"] == "3" for r in rows)
    assert "val_nll_std" in rows[0] and "val_ece_mean" in rows[0]
    # alpha_T = 0 reduces to hard-target training
    hard = []
    for seed in range(3):
        tc, extra = split_config({**MINIMAL, "seed": seed})
        _, hist = run_training(tc, extra, build_dataset(extra["data"]))
        hard.append(hist.epochs[-1]["val_loss"])
    assert float(rows[0]["val_nll_mean"]) == float(np.mean(hard))


def test_sweep_needs_two_alphas(tmp_path):
    assert main(["sweep-alpha", "--alphas", "0.8", "--out", str(tmp_path)]) == 2
    assert main(["sweep-alpha", "--alphas", "0.8,x", "--out", str(tmp_path)]) == 2


def test_sweep_fixed_alpha_mode_differs(tmp_path):
    cfg = {**MINIMAL, "method": "pskd"}
    lin = sweep(cfg, [0.8, 0.5], [0], fixed=False)
    fix = sweep(cfg, [0.8, 0.5], [0], fixed=True)
    assert fix[0]["schedule"] == "fixed"
    assert lin[0]["val_nll_mean"] != fix[0]["val_nll_mean"]


def test_sweep_order_independent():
    cfg = {**MINIMAL, "method": "pskd"}
    a = sweep(cfg, [0.0, 0.8], [0, 1])
    b = sweep(cfg, [0.8, 0.0], [1, 0])
    assert a == b[::-1]
    assert sweep(cfg, [0.0, 0.8], [0, 1], jobs=2) == a


def test_module_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "pskd.cli", "train", "--config",
                          str(write_config(tmp_path)), "--out", str(tmp_path / "r"), "--epochs", "2"],
                         capture_output=True, text=True)
    assert out.returncode == 0, out.stderr
    assert len(read_rows(Path(out.stdout.strip()) / "history.csv")) == 2
