"""Minimum-cost perfect matching on square cost matrices."""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np


@dataclass
class TokenPermutation:
    """``sigma[j]`` is the column matched to row j; ``cost`` the matched total."""

    sigma: np.ndarray
    cost: float

    def __post_init__(self):
        n = len(self.sigma)
        if not np.array_equal(np.sort(self.sigma), np.arange(n)):
            raise ValueError("sigma is not a permutation")


@numba.njit(cache=True)
def _hungarian(cost):
    # shortest augmenting paths with row/column potentials, O(n^3);
    # 1-based with a virtual column 0 as in the classic formulation
    n = cost.shape[0]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    minv = np.empty(n + 1)
    used = np.empty(n + 1, dtype=np.bool_)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv[:] = inf
        used[:] = False
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = -1
            for j in range(1, n + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    sigma = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        sigma[p[j] - 1] = j - 1
    return sigma


def _greedy(cost: np.ndarray) -> np.ndarray:
    n = cost.shape[0]
    order = np.argsort(cost, axis=None, kind="stable")
    sigma = np.full(n, -1)
    taken = np.zeros(n, dtype=bool)
    left = n
    for flat in order:
        r, c = divmod(int(flat), n)
        if sigma[r] < 0 and not taken[c]:
            sigma[r] = c
            taken[c] = True
            left -= 1
            if not left:
                break
    return sigma


def solve_assignment(cost, greedy: bool = False) -> TokenPermutation:
    """Exact minimum-cost matching (``greedy=True`` is an approximate
    shortcut kept for profiling only)."""
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"cost matrix must be square, got shape {cost.shape}")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix has non-finite entries")
    if cost.shape[0] == 0:
        return TokenPermutation(np.zeros(0, dtype=np.int64), 0.0)
    sigma = _greedy(cost) if greedy else _hungarian(cost)
    total = float(cost[np.arange(len(sigma)), sigma].sum())
    return TokenPermutation(sigma, total)


def pairwise_l2(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distances between rows of a and rows of b (float64)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
