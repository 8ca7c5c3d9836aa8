"""Reference implementations written straight from the metric definitions."""

import math
from fractions import Fraction

import numpy as np

from conftest import random_simplex


def brute_ece(probs, labels, M):
    rows = [(max(p), int(np.argmax(p)) == y) for p, y in zip(probs.tolist(), labels.tolist())]
    total = []
    for m in range(1, M + 1):
        members = [(c, ok) for c, ok in rows if (m - 1) / M < c <= m / M or (m == 1 and c == 0)]
        if members:
            acc = sum(ok for _, ok in members) / len(members)
            conf = math.fsum(c for c, _ in members) / len(members)
            total.append(len(members) * abs(acc - conf))
    return math.fsum(total) / len(rows)


def exact_ece(probs, labels, M):
    rows = [(Fraction(max(p)), int(np.argmax(p)) == y) for p, y in zip(probs.tolist(), labels.tolist())]
    total = Fraction(0)
    for m in range(1, M + 1):
        # edges are the float values m/M, matching how confidences are binned
        lo, hi = Fraction((m - 1) / M), Fraction(m / M)
        members = [(c, ok) for c, ok in rows if lo < c <= hi or (m == 1 and c == 0)]
        if members:
            acc = Fraction(sum(ok for _, ok in members), len(members))
            conf = sum(c for c, _ in members) / len(members)
            total += len(members) * abs(acc - conf)
    return total / len(rows)


def brute_aurc(probs, labels, ids):
    rows = sorted(((max(p), i, int(np.argmax(p)) != y)
                   for p, y, i in zip(probs.tolist(), labels.tolist(), ids.tolist())),
                  key=lambda r: (-r[0], r[1]))
    risks = [sum(r[2] for r in rows[:i]) / i for i in range(1, len(rows) + 1)]
    return math.fsum(risks) / len(rows)


def random_records(rng):
    n = int(rng.integers(1, 51))
    K = int(rng.integers(2, 8))
    P = random_simplex(rng, K, size=n, concentration=rng.uniform(0.2, 3))
    if rng.uniform() < 0.5:
        # quantized probabilities exercise confidence ties and bin edges
        P = np.round(P * 20) / 20
        P[:, 0] += 1 - P.sum(axis=1)
        P = np.abs(P)
        P /= P.sum(axis=1, keepdims=True)
    return P, rng.integers(0, K, n), rng.permutation(1000)[:n]
