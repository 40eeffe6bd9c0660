"""Independent reference computations used by the tests.

Nothing here imports the package's numerical kernels: transition matrices
are rebuilt from edge lists with plain numpy.
"""

from __future__ import annotations

import math

import numpy as np


def lazy_matrix(n, edges):
    A = np.zeros((n, n))
    for u, v in edges:
        A[u, v] = A[v, u] = 1.0
    deg = A.sum(axis=1)
    return 0.5 * np.eye(n) + 0.5 * A / deg[:, None]


def brute_mixing_time(P, eps):
    """First k with max_{x,y} TV(P^k(x, .), P^k(y, .)) <= eps."""
    M = np.eye(P.shape[0])
    k = 0
    while True:
        d = max(0.5 * np.abs(M[i] - M[j]).sum() for i in range(len(M)) for j in range(len(M)))
        if d <= eps:
            return k
        M = M @ P
        k += 1


def cycle_edges(n):
    return [(i, (i + 1) % n) for i in range(n)]


def complete_edges(n):
    return [(i, j) for i in range(n) for j in range(i + 1, n)]


def passage_pmf(t):
    """P(first passage of the +-1 walk from -1 to 0 takes exactly t steps)."""
    if t % 2 == 0:
        return 0.0
    j = (t + 1) // 2
    # Catalan number C_{j-1} / 2^(2j-1)
    return math.comb(2 * j - 2, j - 1) / j / 2 ** (2 * j - 1)


def _phi(w):
    return (1 - np.sqrt(np.maximum(1 - w * w, 0.0))) / w


def arrival_law(P, v, levels):
    """Law of the horizontal coordinate when the cylinder walk first climbs ``levels`` levels.

    The horizontal step count has generating function
    ``phi(1 / (2 - z)) ** levels`` with ``phi(w) = (1 - sqrt(1 - w^2)) / w``;
    ``P`` is assumed symmetric, so the matrix function is taken through its
    eigendecomposition.
    """
    lam, U = np.linalg.eigh(P)
    f = _phi(1.0 / (2.0 - lam)) ** levels
    F = (U * f) @ U.T
    return F[v]


def tv(p, q):
    return 0.5 * float(np.abs(np.asarray(p, float) - np.asarray(q, float)).sum())
