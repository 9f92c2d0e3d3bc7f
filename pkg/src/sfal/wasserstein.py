"""Exact L1-Wasserstein distances between equal-weight sample clouds."""
from __future__ import annotations

import numpy as np

ASSIGNMENT_CAP = 512


def w1_exact_1d(a, b) -> float:
    """Mean absolute difference of sorted samples (exact for m = 1, equal sizes)."""
    a = np.asarray(a, dtype=float).reshape(-1)
    b = np.asarray(b, dtype=float).reshape(-1)
    if a.size == 0 or b.size == 0:
        raise ValueError("empty sample cloud")
    if a.size != b.size:
        raise ValueError("w1_exact_1d needs equal sample counts; subsample first")
    return float(np.mean(np.abs(np.sort(a) - np.sort(b))))


def solve_assignment(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost perfect matching of a square cost matrix.

    Shortest augmenting path with row/column potentials (Jonker-Volgenant
    style, O(N^3)).  Returns ``col_of_row`` so that the optimum is
    ``cost[arange(N), col_of_row].sum()``.
    """
    cost = np.asarray(cost, dtype=float)
    n = cost.shape[0]
    if cost.shape != (n, n):
        raise ValueError("cost matrix must be square")
    INF = np.inf
    u = np.zeros(n + 1)            # row potentials, index 0 is a sentinel
    v = np.zeros(n + 1)            # column potentials
    row_of_col = np.zeros(n + 1, dtype=int)   # 0 = unassigned; rows are 1-based
    way = np.zeros(n + 1, dtype=int)
    for i in range(1, n + 1):
        row_of_col[0] = i
        j0 = 0
        minv = np.full(n + 1, INF)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = row_of_col[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            upd = free & (cur < minv[1:])
            minv[1:][upd] = cur[upd]
            way[1:][upd] = j0
            cand = np.where(free, minv[1:], INF)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            # potentials of visited rows/columns move together
            u[row_of_col[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if row_of_col[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            row_of_col[j0] = row_of_col[j1]
            j0 = j1
    col_of_row = np.empty(n, dtype=int)
    col_of_row[row_of_col[1:] - 1] = np.arange(n)
    return col_of_row


def w1_exact_assignment(a, b, cap: int = ASSIGNMENT_CAP) -> float:
    """Exact W1 of two equal-size clouds in any dimension via optimal assignment."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if len(a) == 0 or len(b) == 0:
        raise ValueError("empty sample cloud")
    if len(a) != len(b):
        raise ValueError("w1_exact_assignment needs equal sample counts; subsample first")
    if len(a) > cap:
        raise ValueError(f"N={len(a)} exceeds the assignment cap {cap}; subsample the clouds")
    cost = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)
    cols = solve_assignment(cost)
    return float(cost[np.arange(len(a)), cols].mean())


def equalize(a, b, rng: np.random.Generator, cap: int | None = None):
    """Uniform subsampling without replacement to a common size (at most ``cap``)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n = min(len(a), len(b))
    if cap is not None:
        n = min(n, cap)
    if len(a) > n:
        a = a[np.sort(rng.choice(len(a), n, replace=False))]
    if len(b) > n:
        b = b[np.sort(rng.choice(len(b), n, replace=False))]
    return a, b


def w1(a, b, rng: np.random.Generator | None = None) -> float:
    """W1 between clouds: sorted formula for m = 1, assignment otherwise."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    m = 1 if a.ndim == 1 else a.shape[1]
    rng = rng or np.random.default_rng(0)
    if m == 1:
        a, b = equalize(a.reshape(-1), b.reshape(-1), rng)
        return w1_exact_1d(a, b)
    a, b = equalize(a, b, rng, cap=ASSIGNMENT_CAP)
    return w1_exact_assignment(a, b)
