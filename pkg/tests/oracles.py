"""Independent reference computations used by the tests."""

from __future__ import annotations

import itertools
from fractions import Fraction

import numpy as np


def central_diff(f, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at ``x`` (float64)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = float(f(x))
        flat[i] = old - h
        down = float(f(x))
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return g


def rel_err(analytic, numeric, floor: float = 1e-8) -> float:
    """max |a - n| / max(max |n|, floor)."""
    a = np.asarray(analytic, np.float64)
    n = np.asarray(numeric, np.float64)
    return float(np.max(np.abs(a - n)) / max(float(np.max(np.abs(n))), floor))


def _exact(feats):
    # Fraction(float) is exact, so float features are compared without rounding.
    return [tuple(Fraction(float(v)) for v in row) for row in feats]


def _sq(u, v):
    return sum((a - b) ** 2 for a, b in zip(u, v))


def brute_herding(feats, k: int) -> list[int]:
    """Exhaustive search over ordered k-subsets for greedy mean matching.

    The key interleaves (step objective, index) so the lexicographic minimum
    is the greedy sequence with lowest-index tie breaks.  Exact rational
    arithmetic on the exact values of the (float or integer) features.
    """
    feats = _exact(feats)
    n, d = len(feats), len(feats[0])
    mu = [sum(f[j] for f in feats) / n for j in range(d)]
    best = None
    for order in itertools.permutations(range(n), k):
        key = []
        for m in range(1, k + 1):
            mean = [sum(feats[i][j] for i in order[:m]) / m for j in range(d)]
            key += [sum((a - b) ** 2 for a, b in zip(mu, mean)), order[m - 1]]
        if best is None or key < best[0]:
            best = (key, list(order))
    return best[1]


def brute_kcenter(feats, k: int) -> list[int]:
    """Exhaustive search for greedy k-center (first pick nearest the mean)."""
    feats = _exact(feats)
    n, d = len(feats), len(feats[0])
    mu = [sum(f[j] for f in feats) / n for j in range(d)]
    best = None
    for order in itertools.permutations(range(n), k):
        first = order[0]
        key = [sum((feats[first][j] - mu[j]) ** 2 for j in range(d)), first]
        for m in range(1, k):
            cover = min(_sq(feats[order[m]], feats[c]) for c in order[:m])
            key += [-cover, order[m]]
        if best is None or key < best[0]:
            best = (key, list(order))
    return best[1]
