"""
Dense feed-forward classifier with exact forward/backward passes.

Weights are stored as (in_features, out_features) so that

    z = relu(... relu(x @ W_1 + b_1) ...) @ W_L + b_L

Hidden layers use a rectifier, the output layer is the identity (logits).
All arithmetic is float64. Matrix products go through ``np.einsum`` rather
than BLAS: einsum's row results do not depend on how many rows are in the
batch, which the teacher strategies rely on to agree bit-for-bit.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import InputError, ParameterError, ShapeError

PROB_FLOOR = 1e-12


@dataclass
class MLP:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("need one bias vector per weight matrix and at least one layer")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[1],):
                raise ShapeError(f"layer {i}: weight {W.shape} and bias {b.shape} disagree")
            if i and self.weights[i - 1].shape[1] != W.shape[0]:
                raise ShapeError(f"layer {i}: expects {W.shape[0]} inputs, "
                                 f"previous layer emits {self.weights[i - 1].shape[1]}")
        if self.weights[-1].shape[1] < 2:
            raise ShapeError("need at least 2 output classes")

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]

    @property
    def n_classes(self) -> int:
        return self.weights[-1].shape[1]

    def arrays(self) -> list[np.ndarray]:
        """All parameter arrays, weights then bias, layer by layer."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def copy(self) -> "MLP":
        return MLP([W.copy() for W in self.weights], [b.copy() for b in self.biases])

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())

    def equals(self, other: "MLP") -> bool:
        """Bitwise equality of every parameter."""
        a, b = self.arrays(), other.arrays()
        return len(a) == len(b) and all(
            x.shape == y.shape and x.tobytes() == y.tobytes() for x, y in zip(a, b))


@dataclass
class Gradients:
    """Gradient of a scalar loss, shaped like the MLP it differentiates."""
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    logits: np.ndarray | None = field(default=None, repr=False)

    def arrays(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])


def init_mlp(layer_dims: Sequence[int], seed: int | np.random.Generator = 0) -> MLP:
    """Glorot-uniform weights, zero biases."""
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2 or min(dims) < 1:
        raise ParameterError(f"invalid layer_dims {layer_dims}")
    if dims[-1] < 2:
        raise ParameterError("need at least 2 output classes")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MLP(weights, biases)


def _as_batch(params: MLP, batch) -> np.ndarray:
    X = np.asarray(batch, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError(f"batch must be 2-D, got shape {X.shape}")
    if X.shape[1] != params.layer_dims[0]:
        raise ShapeError(f"batch has {X.shape[1]} columns, network expects {params.layer_dims[0]}")
    return X


def _forward(params: MLP, X: np.ndarray):
    acts = [X]
    pre = []
    h = X
    last = len(params.weights) - 1
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        a = np.einsum("ij,jk->ik", h, W) + b
        pre.append(a)
        h = a if i == last else np.maximum(a, 0.0)
        acts.append(h)
    return h, acts, pre


def forward(params: MLP, batch) -> np.ndarray:
    """Logits, one row per example."""
    return _forward(params, _as_batch(params, batch))[0]


def softmax_tau(logits, tau: float = 1.0) -> np.ndarray:
    """Temperature-scaled softmax along the last axis."""
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    z = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(z).all():
        raise InputError("non-finite logit")
    z = z / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(logits) -> np.ndarray:
    return softmax_tau(logits, 1.0)


def cross_entropy(target, pred) -> np.ndarray | float:
    """H(q, p) = -sum_i q_i log p_i along the last axis, with p clamped at 1e-12."""
    q = np.asarray(target, dtype=np.float64)
    p = np.asarray(pred, dtype=np.float64)
    if q.shape != p.shape:
        raise ShapeError(f"target {q.shape} and prediction {p.shape} differ")
    out = -np.sum(q * np.log(np.maximum(p, PROB_FLOOR)), axis=-1)
    return float(out) if out.ndim == 0 else out


def entropy(q) -> float:
    q = np.asarray(q, dtype=np.float64)
    nz = q > 0
    return float(-np.sum(q[nz] * np.log(q[nz])))


def _check_targets(X: np.ndarray, targets, K: int) -> np.ndarray:
    Q = np.asarray(targets, dtype=np.float64)
    if Q.shape != (X.shape[0], K):
        raise ShapeError(f"targets shape {Q.shape}, expected {(X.shape[0], K)}")
    return Q


def loss(params: MLP, batch, soft_targets) -> float:
    """Batch-mean cross-entropy of softmax(forward(params, batch)) against soft targets."""
    X = _as_batch(params, batch)
    Q = _check_targets(X, soft_targets, params.n_classes)
    return float(np.mean(cross_entropy(Q, softmax(forward(params, X)))))


def backward_from_logits(params: MLP, batch, dlogits) -> Gradients:
    """Backpropagate a given gradient with respect to the logits through the network."""
    X = _as_batch(params, batch)
    G = np.asarray(dlogits, dtype=np.float64)
    if G.shape != (X.shape[0], params.n_classes):
        raise ShapeError(f"logit gradient shape {G.shape}, expected {(X.shape[0], params.n_classes)}")
    _, acts, pre = _forward(params, X)
    gW = [None] * len(params.weights)
    gb = [None] * len(params.weights)
    d = G
    for i in range(len(params.weights) - 1, -1, -1):
        gW[i] = np.einsum("ni,nj->ij", acts[i], d)
        gb[i] = d.sum(axis=0)
        if i:
            d = np.einsum("nj,ij->ni", d, params.weights[i]) * (pre[i - 1] > 0)
    return Gradients(gW, gb, logits=G)


def backward(params: MLP, batch, soft_targets) -> Gradients:
    """
    Exact gradient of ``loss(params, batch, soft_targets)``.

    Uses the softmax/cross-entropy identity dL/dz = p - q per example
    (divided by the batch size for the mean). ``Gradients.logits`` keeps
    that per-example logit gradient, already scaled by 1/n.
    """
    X = _as_batch(params, batch)
    Q = _check_targets(X, soft_targets, params.n_classes)
    P = softmax(forward(params, X))
    return backward_from_logits(params, X, (P - Q) / X.shape[0])


def central_difference(f: Callable[[np.ndarray], float], x, h: float = 1e-6) -> np.ndarray:
    """Entrywise (f(x+h) - f(x-h)) / 2h. ``x`` is perturbed in place and restored."""
    if not h > 0:
        raise ParameterError("step h must be positive")
    x = np.asarray(x)
    grad = np.zeros(x.shape)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + h
        up = f(x)
        flat[j] = orig - h
        down = f(x)
        flat[j] = orig
        g[j] = (up - down) / (2 * h)
    return grad


def finite_difference_oracle(params: MLP, batch, soft_targets, h: float = 1e-6) -> Gradients:
    """Central-difference gradient of ``loss``, one parameter at a time."""
    X = _as_batch(params, batch)
    Q = _check_targets(X, soft_targets, params.n_classes)
    work = params.copy()
    f = lambda _: loss(work, X, Q)
    gW = [central_difference(f, W, h) for W in work.weights]
    gb = [central_difference(f, b, h) for b in work.biases]
    return Gradients(gW, gb)


def relative_error(a, b, floor: float = 1e-4) -> np.ndarray:
    """|a - b| / max(|a|, |b|, floor); the floor keeps exact zeros well-defined."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def freeze(params: MLP) -> MLP:
    """Deep copy whose arrays are read-only."""
    frozen = copy.deepcopy(params)
    for a in frozen.arrays():
        a.flags.writeable = False
    return frozen
