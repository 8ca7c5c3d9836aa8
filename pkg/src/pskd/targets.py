"""Soft-target construction for hard targets, label smoothing, classic KD and PS-KD."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import InputError, ParameterError, ShapeError
from .nn import cross_entropy, softmax, softmax_tau

SIMPLEX_TOL = 1e-9


@dataclass(frozen=True)
class HardTarget:
    name = "hard"


@dataclass(frozen=True)
class LabelSmoothing:
    epsilon: float = 0.1
    name = "ls"

    def __post_init__(self):
        if not 0.0 <= self.epsilon < 1.0:
            raise ParameterError(f"epsilon must lie in [0, 1), got {self.epsilon}")


@dataclass(frozen=True)
class ClassicKD:
    alpha: float = 0.5
    tau: float = 4.0
    name = "kd"

    def __post_init__(self):
        _check_alpha(self.alpha)
        if not self.tau > 0:
            raise ParameterError(f"tau must be positive, got {self.tau}")


@dataclass(frozen=True)
class PSKD:
    """``schedule`` is "linear" (alpha grows to alpha_T) or "fixed" (alpha_T every epoch)."""
    alpha_T: float = 0.8
    schedule: str = "linear"
    name = "pskd"

    def __post_init__(self):
        _check_alpha(self.alpha_T)
        if self.schedule not in ("linear", "fixed"):
            raise ParameterError(f"unknown alpha schedule {self.schedule!r}")

    def alpha_at(self, t: int, T: int) -> float:
        if self.schedule == "fixed":
            if not 1 <= t <= T:
                raise InputError(f"epoch {t} outside 1..{T}")
            return self.alpha_T
        return alpha_schedule(t, T, self.alpha_T)


SofteningMethod = Union[HardTarget, LabelSmoothing, ClassicKD, PSKD]


def _check_alpha(alpha: float) -> None:
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"alpha must lie in [0, 1], got {alpha}")


def is_simplex(p, tol: float = SIMPLEX_TOL) -> bool:
    p = np.asarray(p, dtype=np.float64)
    return bool(np.all(p >= 0) and np.all(p <= 1)
                and np.all(np.abs(p.sum(axis=-1) - 1.0) <= tol))


def one_hot(label, K: int) -> np.ndarray:
    """One-hot rows for an int label or an array of labels."""
    labels = np.asarray(label)
    if labels.dtype.kind not in "iu":
        raise InputError(f"labels must be integers, got {labels.dtype}")
    if np.any(labels < 0) or np.any(labels >= K):
        raise InputError(f"label out of range for K={K}: {label}")
    out = np.zeros(labels.shape + (K,))
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def label_smooth(y, epsilon: float, K: int | None = None) -> np.ndarray:
    """(1 - eps) * y + eps / K."""
    if not 0.0 <= epsilon < 1.0:
        raise ParameterError(f"epsilon must lie in [0, 1), got {epsilon}")
    y = np.asarray(y, dtype=np.float64)
    K = y.shape[-1] if K is None else K
    if y.shape[-1] != K:
        raise ShapeError(f"target has {y.shape[-1]} classes, K={K}")
    if epsilon == 0.0:
        return y.copy()
    return (1.0 - epsilon) * y + epsilon / K


def kd_soft_target(y, teacher, alpha: float) -> np.ndarray:
    """(1 - alpha) * y + alpha * teacher."""
    _check_alpha(alpha)
    y = np.asarray(y, dtype=np.float64)
    teacher = np.asarray(teacher, dtype=np.float64)
    if y.shape != teacher.shape:
        raise ShapeError(f"target {y.shape} and teacher {teacher.shape} differ")
    return (1.0 - alpha) * y + alpha * teacher


def alpha_schedule(t: int, T: int, alpha_T: float) -> float:
    """Linear growth: alpha_t = alpha_T * t / T for epochs t = 1..T."""
    if T < 1 or not 1 <= t <= T:
        raise InputError(f"epoch {t} outside 1..{T}")
    return alpha_T * t / T


def pskd_target(y, past_pred, alpha_t: float) -> np.ndarray:
    """Soft target at epoch t, with the epoch t-1 prediction as the teacher."""
    return kd_soft_target(y, past_pred, alpha_t)


def kd_loss_tau(student_logits, teacher_logits, y, alpha: float, tau: float) -> np.ndarray | float:
    """(1-a) H(y, p_s) + a tau^2 H(p~_t(tau), p~_s(tau))."""
    _check_alpha(alpha)
    s = np.asarray(student_logits, dtype=np.float64)
    t = np.asarray(teacher_logits, dtype=np.float64)
    if s.shape != t.shape:
        raise ShapeError(f"student {s.shape} and teacher {t.shape} logits differ")
    hard = cross_entropy(y, softmax(s))
    soft = cross_entropy(softmax_tau(t, tau), softmax_tau(s, tau))
    return (1.0 - alpha) * hard + alpha * tau * tau * soft


def kd_logit_gradient(student_logits, teacher_logits, y, alpha: float, tau: float) -> np.ndarray:
    """d kd_loss_tau / d student_logits = (1-a)(p - y) + a tau (p~_s - p~_t)."""
    _check_alpha(alpha)
    s = np.asarray(student_logits, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return ((1.0 - alpha) * (softmax(s) - y)
            + alpha * tau * (softmax_tau(s, tau) - softmax_tau(teacher_logits, tau)))


def uniform(K: int) -> np.ndarray:
    return np.full(K, 1.0 / K)
