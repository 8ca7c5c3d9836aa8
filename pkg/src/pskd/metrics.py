"""
Accuracy and confidence-estimation metrics.

Confidence is the maximum class probability. Sums inside ECE and AURC use
``math.fsum`` so the result does not depend on summation order, which lets
the bin table reproduce ECE exactly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InputError, ParameterError, ShapeError
from .nn import PROB_FLOOR

DEFAULT_BINS = 15


@dataclass(frozen=True)
class EvalRecord:
    example_id: int
    probs: np.ndarray
    true_label: int


def stack_records(records: Sequence[EvalRecord]):
    """(probs, labels, ids) arrays from a list of records."""
    if not records:
        raise InputError("no records")
    probs = np.stack([np.asarray(r.probs, dtype=np.float64) for r in records])
    labels = np.array([r.true_label for r in records], dtype=np.int64)
    ids = np.array([r.example_id for r in records], dtype=np.int64)
    return probs, labels, ids


def _check(probs, labels):
    P = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if P.ndim != 2 or y.shape != (P.shape[0],):
        raise ShapeError(f"probs {P.shape} and labels {y.shape} disagree")
    if P.shape[0] == 0:
        raise InputError("no records")
    if y.min() < 0 or y.max() >= P.shape[1]:
        raise InputError("label out of range")
    return P, y


def confidence(probs) -> np.ndarray:
    return np.asarray(probs, dtype=np.float64).max(axis=-1)


def predictions(probs) -> np.ndarray:
    """Argmax with ties going to the lower class index."""
    return np.argmax(np.asarray(probs), axis=-1)


def topk_error(probs, labels, k: int = 1) -> float:
    P, y = _check(probs, labels)
    if not 1 <= k <= P.shape[1]:
        raise ParameterError(f"k={k} outside 1..{P.shape[1]}")
    order = np.argsort(-P, axis=1, kind="stable")[:, :k]
    hit = (order == y[:, None]).any(axis=1)
    return float(1.0 - hit.mean())


def nll(probs, labels) -> float:
    P, y = _check(probs, labels)
    p = np.maximum(P[np.arange(y.size), y], PROB_FLOOR)
    return float(np.mean(-np.log(p)))


@dataclass(frozen=True)
class Bin:
    low: float
    high: float
    count: int
    accuracy: float         # nan for an empty bin
    mean_confidence: float  # nan for an empty bin


def bin_index(conf, n_bins: int) -> np.ndarray:
    """Bin m (0-based) covers (m/M, (m+1)/M]; confidence 0 goes to the first bin."""
    edges = np.arange(1, n_bins) / n_bins
    return np.searchsorted(edges, np.asarray(conf), side="left")


def reliability_bins(probs, labels, n_bins: int = DEFAULT_BINS) -> list[Bin]:
    P, y = _check(probs, labels)
    if n_bins < 1:
        raise ParameterError("need at least one bin")
    conf = confidence(P)
    correct = predictions(P) == y
    idx = bin_index(conf, n_bins)
    bins = []
    for m in range(n_bins):
        sel = idx == m
        c = int(sel.sum())
        if c:
            acc = int(correct[sel].sum()) / c
            mc = math.fsum(conf[sel]) / c
        else:
            acc = mc = float("nan")
        bins.append(Bin(m / n_bins, (m + 1) / n_bins, c, acc, mc))
    return bins


def ece_from_bins(bins: Sequence[Bin]) -> float:
    n = sum(b.count for b in bins)
    return math.fsum(b.count * abs(b.accuracy - b.mean_confidence) for b in bins if b.count) / n


def ece(probs, labels, n_bins: int = DEFAULT_BINS) -> float:
    """(1/n) * sum_m |B_m| * |acc(B_m) - conf(B_m)| over equal-width confidence bins."""
    P, y = _check(probs, labels)
    if n_bins < 1:
        raise ParameterError("need at least one bin")
    conf = confidence(P)
    correct = predictions(P) == y
    idx = bin_index(conf, n_bins)
    terms = []
    for m in np.unique(idx):
        sel = idx == m
        c = int(sel.sum())
        terms.append(c * abs(int(correct[sel].sum()) / c - math.fsum(conf[sel]) / c))
    return math.fsum(terms) / y.size


def risk_coverage(probs, labels, ids=None) -> tuple[np.ndarray, np.ndarray]:
    """
    Coverage i/n and risk (error rate among the i most confident) for i = 1..n.
    Equal confidences are ordered by ascending example id.
    """
    P, y = _check(probs, labels)
    ids = np.arange(y.size) if ids is None else np.asarray(ids)
    order = np.lexsort((ids, -confidence(P)))
    errors = np.cumsum(predictions(P)[order] != y[order])
    i = np.arange(1, y.size + 1)
    return i / y.size, errors / i


def aurc(probs, labels, ids=None) -> float:
    """Mean risk over the n coverage levels (unscaled; tables often report x1000)."""
    _, risk = risk_coverage(probs, labels, ids)
    return math.fsum(risk) / risk.size


def ensemble_predict(model_outputs) -> np.ndarray:
    """Arithmetic mean of the models' probability vectors (first axis indexes models)."""
    arrs = [np.asarray(m, dtype=np.float64) for m in model_outputs]
    if not arrs:
        raise InputError("need at least one model")
    if any(a.shape != arrs[0].shape for a in arrs):
        raise ShapeError(f"model outputs disagree in shape: {[a.shape for a in arrs]}")
    return np.mean(np.stack(arrs), axis=0)


@dataclass
class MetricsReport:
    top1_error: float
    top5_error: float
    nll: float
    ece: float
    aurc: float
    bins: list[Bin] = field(repr=False)
    coverage: np.ndarray = field(repr=False)
    risk: np.ndarray = field(repr=False)

    def summary(self) -> dict[str, float]:
        return {"top1_error": self.top1_error, "top5_error": self.top5_error,
                "nll": self.nll, "ece": self.ece, "aurc": self.aurc}


def evaluate(probs, labels, ids=None, n_bins: int = DEFAULT_BINS) -> MetricsReport:
    P, y = _check(probs, labels)
    bins = reliability_bins(P, y, n_bins)
    cov, risk = risk_coverage(P, y, ids)
    return MetricsReport(
        top1_error=topk_error(P, y, 1),
        top5_error=topk_error(P, y, min(5, P.shape[1])),
        nll=nll(P, y),
        ece=ece_from_bins(bins),
        aurc=math.fsum(risk) / risk.size,
        bins=bins, coverage=cov, risk=risk,
    )


def write_metrics_csvs(report: MetricsReport, out_dir) -> dict[str, Path]:
    """summary.csv, reliability.csv and risk_coverage.csv in ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / f"{name}.csv" for name in ("summary", "reliability", "risk_coverage")}
    with open(paths["summary"], "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "value"])
        for k, v in report.summary().items():
            w.writerow([k, repr(v)])
    with open(paths["reliability"], "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["bin_low", "bin_high", "count", "accuracy", "mean_confidence"])
        for b in report.bins:
            w.writerow([repr(b.low), repr(b.high), b.count, repr(b.accuracy), repr(b.mean_confidence)])
    with open(paths["risk_coverage"], "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["coverage", "risk"])
        for c, r in zip(report.coverage, report.risk):
            w.writerow([repr(float(c)), repr(float(r))])
    return paths


def read_summary_csv(path) -> dict[str, float]:
    with open(path, newline="") as f:
        return {row["metric"]: float(row["value"]) for row in csv.DictReader(f)}
