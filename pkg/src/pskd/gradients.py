"""
Closed-form logit gradients of the PS-KD objective and the gradient
rescaling they induce relative to plain cross-entropy.

With gamma = 1 - p_GT (the probability of being wrong), the L1 norm of the
PS-KD logit gradient is 2*gamma_t - 2*alpha*gamma_{t-1} whenever alpha is
admissible, against 2*gamma_t for hard targets, giving the rescaling factor

    1 - alpha * gamma_{t-1} / gamma_t

Examples whose predictions improve slowly (hard examples) keep a ratio near
one and therefore a larger factor.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .errors import InputError, ShapeError, SingularityError


@dataclass(frozen=True)
class LogitGradient:
    entries: np.ndarray
    gt_index: int


class L1Norm(NamedTuple):
    value: float
    closed_form: float
    admissible: bool


@dataclass(frozen=True)
class RescalingReport:
    example_id: int
    epoch: int
    gamma_t: float
    gamma_prev: float
    factor: float  # nan when gamma_t == 0 (converged)
    admissible_alpha_bound: float

    @property
    def converged(self) -> bool:
        return self.gamma_t == 0.0


def _vectors(*vs):
    arrs = [np.asarray(v, dtype=np.float64) for v in vs]
    if any(a.ndim != 1 or a.shape != arrs[0].shape for a in arrs):
        raise ShapeError(f"expected equal-length vectors, got {[a.shape for a in arrs]}")
    return arrs


def _gt(y: np.ndarray) -> int:
    gt = int(np.argmax(y))
    if y[gt] != 1.0 or np.count_nonzero(y) != 1:
        raise InputError("target must be one-hot")
    return gt


def pskd_logit_gradient(p_t, p_prev, y, alpha: float) -> LogitGradient:
    """(1 - alpha)(p_t - y) + alpha (p_t - p_prev), entrywise."""
    p_t, p_prev, y = _vectors(p_t, p_prev, y)
    g = (1.0 - alpha) * (p_t - y) + alpha * (p_t - p_prev)
    return LogitGradient(g, _gt(y))


def gt_entry(p_tGT: float, p_prevGT: float, alpha: float) -> float:
    return (p_tGT - 1.0) - alpha * (p_prevGT - 1.0)


def non_gt_entry(p_ti: float, p_previ: float, alpha: float) -> float:
    return p_ti - alpha * p_previ


def admissible_alpha_bound(p_t, p_prev, gt: int) -> float:
    """min over non-target classes of p_t[i] / p_prev[i]; zero denominators count as +inf."""
    p_t, p_prev = _vectors(p_t, p_prev)
    mask = np.arange(p_t.size) != gt
    num, den = p_t[mask], p_prev[mask]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.inf)
    return float(ratios.min()) if ratios.size else float("inf")


def grad_l1_norm(grad: LogitGradient, p_t, p_prev, y, alpha: float) -> L1Norm:
    """
    Direct L1 norm of ``grad`` alongside the closed form 2(1-p_tGT) - 2a(1-p_prevGT).

    ``admissible`` says whether alpha is within the bound under which the two
    agree; outside it only ``value`` is meaningful.
    """
    p_t, p_prev, y = _vectors(p_t, p_prev, y)
    gt = grad.gt_index
    closed = 2.0 * (1.0 - p_t[gt]) - 2.0 * alpha * (1.0 - p_prev[gt])
    ok = alpha <= admissible_alpha_bound(p_t, p_prev, gt)
    return L1Norm(float(np.abs(grad.entries).sum()), float(closed), bool(ok))


def rescaling_factor(p_tGT: float, p_prevGT: float, alpha: float) -> float:
    gamma_t = 1.0 - p_tGT
    if gamma_t <= 0.0:
        raise SingularityError("target probability is 1; rescaling factor undefined")
    return 1.0 - alpha * ((1.0 - p_prevGT) / gamma_t)


def rescaling_factors(p_tGT, p_prevGT, alpha) -> np.ndarray:
    """Vectorized ``rescaling_factor``; nan where gamma_t == 0."""
    gamma_t = 1.0 - np.asarray(p_tGT, dtype=np.float64)
    gamma_prev = 1.0 - np.asarray(p_prevGT, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        f = 1.0 - np.asarray(alpha) * (gamma_prev / gamma_t)
    return np.where(gamma_t > 0, f, np.nan)


# --- hard-example analysis over a training history -------------------------

@dataclass
class ExampleHistory:
    """End-of-epoch predictions on the training set: probs[t-1, j] is epoch t, example j."""
    probs: np.ndarray       # (T, n, K)
    labels: np.ndarray      # (n,)
    ids: np.ndarray         # (n,)
    alphas: np.ndarray      # (T,)

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.alphas = np.asarray(self.alphas, dtype=np.float64)
        if self.probs.ndim != 3 or self.probs.shape[0] == 0 or self.probs.shape[1] == 0:
            raise InputError("history is empty")
        T, n, _ = self.probs.shape
        if self.labels.shape != (n,) or self.ids.shape != (n,) or self.alphas.shape != (T,):
            raise ShapeError("history arrays disagree on epochs/examples")

    @property
    def gt_prob(self) -> np.ndarray:
        return np.take_along_axis(self.probs, self.labels[None, :, None], axis=2)[..., 0]

    @property
    def max_prob(self) -> np.ndarray:
        return self.probs.max(axis=2)

    @property
    def correct(self) -> np.ndarray:
        return np.argmax(self.probs, axis=2) == self.labels[None, :]


@dataclass
class HardExampleReport:
    hard_ids: np.ndarray
    easy_ids: np.ndarray
    hard_mask: np.ndarray
    gamma: np.ndarray          # (T, n)
    factor: np.ndarray         # (T, n); nan at t=1 and where converged
    bound: np.ndarray          # (T, n); nan at t=1
    group_rows: list[dict]
    violations: int            # records with gamma_{t-1} < gamma_t
    ids: np.ndarray

    def records(self) -> Iterator[RescalingReport]:
        T, n = self.gamma.shape
        for t in range(1, T):
            for j in range(n):
                yield RescalingReport(int(self.ids[j]), t + 1, float(self.gamma[t, j]),
                                      float(self.gamma[t - 1, j]), float(self.factor[t, j]),
                                      float(self.bound[t, j]))

    def group_factor(self, group: str) -> np.ndarray:
        """Per-epoch mean rescaling factor of one group (nan where undefined)."""
        return np.array([r["mean_rescaling_factor"] for r in self.group_rows if r["group"] == group])

    def mining_fraction(self, start_epoch: int) -> tuple[int, int]:
        """(epochs where hard mean factor > easy mean factor, epochs compared) for t >= start_epoch."""
        hard, easy = self.group_factor("hard"), self.group_factor("easy")
        wins = total = 0
        for t in range(max(start_epoch, 2), len(hard) + 1):
            h, e = hard[t - 1], easy[t - 1]
            if np.isnan(h) or np.isnan(e):
                continue
            total += 1
            wins += bool(h > e)
        return wins, total


CSV_COLUMNS = ["epoch", "group", "mean_gt_prob", "mean_max_prob", "mean_rescaling_factor", "n_examples"]


def hard_example_report(history: ExampleHistory, threshold: float = 0.5) -> HardExampleReport:
    """
    Split examples into hard (correct in fewer than ``threshold`` of the
    epochs) and easy, and summarize both groups per epoch.
    """
    gt = history.gt_prob
    mx = history.max_prob
    correct = history.correct
    T, n = gt.shape
    hard = correct.mean(axis=0) < threshold

    gamma = 1.0 - gt
    factor = np.full((T, n), np.nan)
    bound = np.full((T, n), np.nan)
    if T > 1:
        factor[1:] = rescaling_factors(gt[1:], gt[:-1], history.alphas[1:, None])
        p_t, p_prev = history.probs[1:], history.probs[:-1]
        nongt = np.ones(history.probs.shape[1:], dtype=bool)
        nongt[np.arange(n), history.labels] = False
        with np.errstate(divide="ignore", invalid="ignore"):
            ratios = np.where(p_prev > 0, p_t / np.where(p_prev > 0, p_prev, 1.0), np.inf)
        bound[1:] = np.where(nongt[None], ratios, np.inf).min(axis=2)
    violations = int(np.sum(gamma[:-1] < gamma[1:]))

    rows = []
    for t in range(T):
        for name, mask in (("hard", hard), ("easy", ~hard)):
            f = factor[t, mask]
            f = f[~np.isnan(f)]
            rows.append({
                "epoch": t + 1,
                "group": name,
                "mean_gt_prob": float(gt[t, mask].mean()) if mask.any() else float("nan"),
                "mean_max_prob": float(mx[t, mask].mean()) if mask.any() else float("nan"),
                "mean_rescaling_factor": float(f.mean()) if f.size else float("nan"),
                "n_examples": int(mask.sum()),
            })
    return HardExampleReport(history.ids[hard], history.ids[~hard], hard, gamma, factor,
                             bound, rows, violations, history.ids)


def write_report_csv(report: HardExampleReport, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for row in report.group_rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return path
