"""
Epoch loop: soft targets per method, SGD with momentum and step learning-rate
decay, and the epoch t-1 teacher for PS-KD.

PS-KD has no teacher during epoch 1 and trains on hard targets there; from
epoch 2 on, the target for example x is
(1 - alpha_t) * y + alpha_t * P_{t-1}(x), where P_{t-1} is the model as it
stood at the end of epoch t-1. The teacher is refreshed once per epoch
boundary, never mid-epoch.
"""

from __future__ import annotations

import csv
import io
import logging
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import metrics
from .data import Dataset, Standardizer, split_train_val
from .errors import CacheMissError, ParameterError, ShapeError, TrainingAborted
from .gradients import ExampleHistory
from .nn import MLP, Gradients, backward_from_logits, cross_entropy, forward, init_mlp, softmax
from .store import PredictionCache, disk_teacher, persist, snapshot_teacher, teacher_predict_batch
from .targets import (ClassicKD, HardTarget, LabelSmoothing, PSKD, SofteningMethod, kd_logit_gradient,
                      kd_loss_tau, label_smooth, one_hot, pskd_target)

log = logging.getLogger(__name__)

TEACHER_STRATEGIES = ("snapshot", "disk")


@dataclass
class TrainConfig:
    method: SofteningMethod = field(default_factory=HardTarget)
    epochs: int = 60
    batch_size: int = 64
    lr: float = 0.1
    lr_decay_factor: float = 0.1
    lr_decay_epochs: tuple[int, ...] = ()
    momentum: float = 0.9
    weight_decay: float = 5e-4
    decay_biases: bool = True
    seed: int = 0
    teacher: str = "snapshot"
    hidden: tuple[int, ...] = (64,)
    val_fraction: float = 0.1
    standardize: bool = True
    per_example_log: bool = False

    def __post_init__(self):
        self.lr_decay_epochs = tuple(int(e) for e in self.lr_decay_epochs)
        self.hidden = tuple(int(h) for h in self.hidden)
        self.validate()

    def validate(self) -> None:
        def bad(name, why):
            raise ParameterError(f"{name}: {why}")
        if self.epochs < 1:
            bad("epochs", "must be >= 1")
        if self.batch_size < 1:
            bad("batch_size", "must be >= 1")
        if not self.lr > 0:
            bad("lr", "must be positive")
        if not 0 <= self.momentum < 1:
            bad("momentum", "must lie in [0, 1)")
        if self.weight_decay < 0:
            bad("weight_decay", "must be nonnegative")
        if not self.lr_decay_factor > 0:
            bad("lr_decay_factor", "must be positive")
        d = self.lr_decay_epochs
        if any(b <= a for a, b in zip(d, d[1:])):
            bad("lr_decay_epochs", "must be strictly increasing")
        if d and (d[0] < 1 or d[-1] >= self.epochs):
            bad("lr_decay_epochs", f"must lie in [1, epochs={self.epochs})")
        if self.teacher not in TEACHER_STRATEGIES:
            bad("teacher", f"must be one of {TEACHER_STRATEGIES}")
        if not 0 <= self.val_fraction < 1:
            bad("val_fraction", "must lie in [0, 1)")
        if any(h < 1 for h in self.hidden):
            bad("hidden", "layer widths must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        m = self.method
        d["method"] = m.name
        d.update({"alpha_T": 0.0, "alpha_schedule": "linear", "epsilon": 0.1, "kd_alpha": 0.5, "tau": 4.0})
        if isinstance(m, PSKD):
            d["alpha_T"], d["alpha_schedule"] = m.alpha_T, m.schedule
        elif isinstance(m, LabelSmoothing):
            d["epsilon"] = m.epsilon
        elif isinstance(m, ClassicKD):
            d["kd_alpha"], d["tau"] = m.alpha, m.tau
        d["lr_decay_epochs"] = list(self.lr_decay_epochs)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        name = d.pop("method", "hard")
        alpha_T = d.pop("alpha_T", 0.8)
        schedule = d.pop("alpha_schedule", "linear")
        epsilon = d.pop("epsilon", 0.1)
        kd_alpha = d.pop("kd_alpha", 0.5)
        tau = d.pop("tau", 4.0)
        methods = {
            "hard": HardTarget,
            "ls": lambda: LabelSmoothing(float(epsilon)),
            "kd": lambda: ClassicKD(float(kd_alpha), float(tau)),
            "pskd": lambda: PSKD(float(alpha_T), schedule),
        }
        if name not in methods:
            raise ParameterError(f"method: unknown method {name!r}; choose from {sorted(methods)}")
        known = set(cls.__dataclass_fields__) - {"method"}
        unknown = set(d) - known
        if unknown:
            raise ParameterError(f"unknown config keys: {sorted(unknown)}")
        return cls(method=methods[name](), **d)


def lr_at_epoch(config: TrainConfig, t: int) -> float:
    """lr * factor ** (number of decay epochs <= t)."""
    n = sum(1 for e in config.lr_decay_epochs if e <= t)
    return config.lr * config.lr_decay_factor ** n


def alpha_at_epoch(method: SofteningMethod, t: int, T: int) -> float:
    """Mixing weight logged for epoch t (the teacher weight; 0 for hard targets)."""
    if isinstance(method, PSKD):
        return method.alpha_at(t, T)
    if isinstance(method, LabelSmoothing):
        return method.epsilon
    if isinstance(method, ClassicKD):
        return method.alpha
    return 0.0


def sgd_update(param, grad, velocity, lr, momentum, weight_decay=0.0):
    """v <- m*v + (g + wd*p); p <- p - lr*v. Returns new (param, velocity)."""
    v = momentum * velocity + (grad + weight_decay * param)
    return param - lr * v, v


def sgd_momentum_step(params: MLP, grads: Gradients, velocity: Gradients, lr: float,
                      momentum: float, weight_decay: float, decay_biases: bool = True):
    if len(grads.weights) != len(params.weights) or any(
            g.shape != p.shape for g, p in zip(grads.arrays(), params.arrays())):
        raise ShapeError("gradient shapes do not match parameters")
    new_w, new_b, vel_w, vel_b = [], [], [], []
    for W, b, gW, gb, vW, vb in zip(params.weights, params.biases, grads.weights, grads.biases,
                                    velocity.weights, velocity.biases):
        W2, vW2 = sgd_update(W, gW, vW, lr, momentum, weight_decay)
        b2, vb2 = sgd_update(b, gb, vb, lr, momentum, weight_decay if decay_biases else 0.0)
        new_w.append(W2); new_b.append(b2); vel_w.append(vW2); vel_b.append(vb2)
    return MLP(new_w, new_b), Gradients(vel_w, vel_b)


def zero_velocity(params: MLP) -> Gradients:
    return Gradients([np.zeros_like(W) for W in params.weights], [np.zeros_like(b) for b in params.biases])


def build_targets(method: SofteningMethod, Y: np.ndarray, teacher_probs: np.ndarray | None,
                  alpha: float) -> np.ndarray:
    """Training targets for a batch of one-hot rows ``Y`` (not used for classic KD)."""
    if isinstance(method, LabelSmoothing):
        return label_smooth(Y, method.epsilon)
    if isinstance(method, PSKD):
        return Y if teacher_probs is None else pskd_target(Y, teacher_probs, alpha)
    return Y


EPOCH_COLUMNS = ["epoch", "alpha", "lr", "train_loss", "val_loss", "val_top1_error", "val_ece", "val_aurc"]


@dataclass
class TrainHistory:
    epochs: list[dict]
    train_ids: np.ndarray
    train_labels: np.ndarray
    val_ids: np.ndarray
    standardizer: Standardizer
    example_probs: np.ndarray | None = None   # (T, n_train, K) end-of-epoch predictions

    def column(self, name: str) -> np.ndarray:
        return np.array([row[name] for row in self.epochs])

    def epochs_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(EPOCH_COLUMNS)
        for row in self.epochs:
            w.writerow([row["epoch"]] + [repr(float(row[c])) for c in EPOCH_COLUMNS[1:]])
        return buf.getvalue()

    def examples_csv(self) -> str:
        if self.example_probs is None:
            raise ValueError("per-example history was not recorded")
        T, n, K = self.example_probs.shape
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "example_id", "label", "gt_prob", "max_prob", "correct"]
                   + [f"p{k}" for k in range(K)])
        for t in range(T):
            P = self.example_probs[t]
            pred = np.argmax(P, axis=1)
            for j in range(n):
                y = int(self.train_labels[j])
                w.writerow([t + 1, int(self.train_ids[j]), y, repr(float(P[j, y])), repr(float(P[j].max())),
                            int(pred[j] == y)] + [repr(float(v)) for v in P[j]])
        return buf.getvalue()

    def example_history(self) -> ExampleHistory:
        if self.example_probs is None:
            raise ValueError("per-example history was not recorded")
        return ExampleHistory(self.example_probs, self.train_labels, self.train_ids, self.column("alpha"))


def read_examples_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(probs (T, n, K), labels, ids) parsed from ``TrainHistory.examples_csv`` output."""
    path = Path(path)
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise ValueError(f"{path} has no rows")
    K = sum(1 for k in rows[0] if k.startswith("p") and k[1:].isdigit())
    T = max(int(r["epoch"]) for r in rows)
    ids = sorted({int(r["example_id"]) for r in rows})
    col = {i: j for j, i in enumerate(ids)}
    probs = np.full((T, len(ids), K), np.nan)
    labels = np.zeros(len(ids), dtype=np.int64)
    for r in rows:
        j = col[int(r["example_id"])]
        probs[int(r["epoch"]) - 1, j] = [float(r[f"p{k}"]) for k in range(K)]
        labels[j] = int(r["label"])
    return probs, labels, np.array(ids)


def train(config: TrainConfig, dataset: Dataset, *, kd_teacher: MLP | None = None,
          cache_dir=None, monitor: Callable | None = None) -> tuple[MLP, TrainHistory]:
    """
    Train a classifier on ``dataset`` according to ``config``.

    ``kd_teacher`` is required for classic KD and must accept standardized
    inputs. ``cache_dir`` holds the per-epoch prediction caches of the disk
    strategy (a temporary directory when omitted). ``monitor``, if given, is
    called as ``monitor(stage, epoch, teacher, params)`` with stage
    "epoch_start" and "epoch_end".
    """
    config.validate()
    method = config.method
    if isinstance(method, ClassicKD) and kd_teacher is None:
        raise ParameterError("method: classic KD needs a trained teacher network")
    if dataset.n == 0:
        raise ParameterError("dataset is empty")
    T = config.epochs
    K = dataset.n_classes
    train_ds, val_ds = split_train_val(dataset, config.val_fraction, config.seed)
    std = Standardizer.fit(train_ds.features) if config.standardize else Standardizer.identity(dataset.dim)
    Xtr, Xva = std(train_ds.features), std(val_ds.features)
    Ytr = one_hot(train_ds.labels, K)
    n = train_ds.n

    params = init_mlp([dataset.dim, *config.hidden, K], np.random.default_rng([config.seed, 0]))
    velocity = zero_velocity(params)
    example_probs = np.empty((T, n, K)) if config.per_example_log else None
    uses_teacher = isinstance(method, PSKD)

    tmp = None
    if uses_teacher and config.teacher == "disk" and cache_dir is None:
        tmp = tempfile.TemporaryDirectory(prefix="pskd-cache-")
        cache_dir = tmp.name
    if cache_dir is not None:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)

    teacher = None
    rows = []
    try:
        for t in range(1, T + 1):
            lr = lr_at_epoch(config, t)
            alpha = alpha_at_epoch(method, t, T)
            if monitor:
                monitor("epoch_start", t, teacher, params)
            order = np.random.default_rng([config.seed, 2, t]).permutation(n)
            loss_sum = 0.0
            for b, start in enumerate(range(0, n, config.batch_size)):
                idx = order[start:start + config.batch_size]
                X, Y, ids = Xtr[idx], Ytr[idx], train_ds.ids[idx]
                Z = forward(params, X)
                if not np.isfinite(Z).all():
                    raise TrainingAborted(f"non-finite loss at epoch {t}, batch {b} (logits overflowed)")
                if isinstance(method, ClassicKD):
                    Zt = forward(kd_teacher, X)
                    losses = kd_loss_tau(Z, Zt, Y, method.alpha, method.tau)
                    dZ = kd_logit_gradient(Z, Zt, Y, method.alpha, method.tau)
                else:
                    teacher_probs = None
                    if uses_teacher and teacher is not None:
                        try:
                            teacher_probs = teacher_predict_batch(teacher, ids, X)
                        except CacheMissError as exc:
                            raise TrainingAborted(f"epoch {t}, batch {b}: {exc}") from exc
                    Q = build_targets(method, Y, teacher_probs, alpha)
                    P = softmax(Z)
                    losses = cross_entropy(Q, P)
                    dZ = P - Q
                batch_loss = float(np.sum(losses))
                if not np.isfinite(batch_loss):
                    raise TrainingAborted(f"non-finite loss at epoch {t}, batch {b}")
                grads = backward_from_logits(params, X, dZ / idx.size)
                params, velocity = sgd_momentum_step(params, grads, velocity, lr, config.momentum,
                                                     config.weight_decay, config.decay_biases)
                loss_sum += batch_loss
            if not params.all_finite():
                raise TrainingAborted(f"non-finite parameters after epoch {t}")

            P_train = softmax(forward(params, Xtr))
            if example_probs is not None:
                example_probs[t - 1] = P_train
            row = {"epoch": t, "alpha": alpha, "lr": lr, "train_loss": loss_sum / n}
            row.update(_val_metrics(params, Xva, val_ds))
            rows.append(row)
            log.debug("epoch %d: %s", t, row)

            if monitor:
                monitor("epoch_end", t, teacher, params)
            if uses_teacher:
                if config.teacher == "snapshot":
                    teacher = snapshot_teacher(params, t)
                else:
                    cache = PredictionCache(train_ds.ids, K, t).record_batch(train_ds.ids, P_train)
                    teacher = disk_teacher(persist(cache, Path(cache_dir) / f"epoch_{t:04d}.pskd"))
    finally:
        if tmp is not None:
            tmp.cleanup()

    history = TrainHistory(rows, train_ds.ids, train_ds.labels, val_ds.ids, std, example_probs)
    return params, history


def _val_metrics(params: MLP, Xva: np.ndarray, val_ds: Dataset) -> dict:
    if val_ds.n == 0:
        nan = float("nan")
        return {"val_loss": nan, "val_top1_error": nan, "val_ece": nan, "val_aurc": nan}
    P = softmax(forward(params, Xva))
    return {
        "val_loss": metrics.nll(P, val_ds.labels),
        "val_top1_error": metrics.topk_error(P, val_ds.labels, 1),
        "val_ece": metrics.ece(P, val_ds.labels),
        "val_aurc": metrics.aurc(P, val_ds.labels, val_ds.ids),
    }


# --- model files -------------------------------------------------------------

def save_model(path, params: MLP, standardizer: Standardizer) -> Path:
    path = Path(path)
    arrays = {"n_layers": np.array(len(params.weights)),
              "feature_mean": standardizer.mean, "feature_std": standardizer.std}
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        arrays[f"W{i}"] = W
        arrays[f"b{i}"] = b
    with open(path, "wb") as f:
        np.savez(f, **arrays)
    return path


def load_model(path) -> tuple[MLP, Standardizer]:
    with np.load(path) as z:
        L = int(z["n_layers"])
        params = MLP([z[f"W{i}"] for i in range(L)], [z[f"b{i}"] for i in range(L)])
        return params, Standardizer(z["feature_mean"], z["feature_std"])


def predict_proba(params: MLP, standardizer: Standardizer, features) -> np.ndarray:
    return softmax(forward(params, standardizer(features)))
