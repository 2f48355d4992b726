"""Exact bipartite matching between padded target sets and query predictions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class Assignment:
    """``sigma[i]`` is the prediction index matched to target row ``i``."""

    sigma: tuple[int, ...]
    total_cost: float


def matching_cost(is_empty: bool, p_hat: float, cos_sim: float, mu: float) -> float:
    if is_empty:
        return 0.0
    return -(mu * p_hat + cos_sim)


def build_cost_matrix(target_embeddings, probs, semantics, mu: float) -> np.ndarray:
    """N x N cost matrix; rows past the real targets are padding and cost 0.

    ``target_embeddings`` is (m, d) with m <= N, ``probs`` (N,) and
    ``semantics`` (N, d). All embeddings are taken to be unit-norm, so the
    cosine is a plain dot product.
    """
    probs = np.asarray(probs, dtype=np.float64)
    sem = np.asarray(semantics, dtype=np.float64)
    tgt = np.asarray(target_embeddings, dtype=np.float64)
    n = probs.shape[0]
    if sem.ndim != 2 or sem.shape[0] != n:
        raise ValidationError(f"expected {n} semantic embeddings, got shape {sem.shape}")
    if tgt.size == 0:
        return np.zeros((n, n))
    if tgt.ndim != 2 or tgt.shape[1] != sem.shape[1]:
        raise ValidationError(f"target dimension {tgt.shape} does not match predictions {sem.shape}")
    m = tgt.shape[0]
    if m > n:
        raise ValidationError(f"{m} targets exceed the {n} queries")
    cost = np.zeros((n, n))
    cost[:m] = -(mu * probs[None, :] + tgt @ sem.T)
    return cost


def _solve(cost: np.ndarray):
    """Shortest augmenting path assignment (Jonker-Volgenant style).

    Returns (row->col array, row potentials u, column potentials v) with
    reduced costs ``cost[i, j] - u[i] - v[j] >= 0`` and equality on the
    matched edges.
    """
    n = cost.shape[0]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    # col_row[j] = row assigned to column j (1-based, 0 = free); column 0 is a sentinel
    col_row = np.zeros(n + 1, dtype=int)
    way = np.zeros(n + 1, dtype=int)
    c = np.zeros((n + 1, n + 1))
    c[1:, 1:] = cost
    for i in range(1, n + 1):
        col_row[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = col_row[j0]
            free = ~used
            free[0] = False
            cur = c[i0] - u[i0] - v
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            cand = np.where(free, minv, inf)
            j1 = int(np.argmin(cand))
            delta = cand[j1]
            u[col_row[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if col_row[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            col_row[j0] = col_row[j1]
            j0 = j1
    row_col = np.empty(n, dtype=int)
    for j in range(1, n + 1):
        row_col[col_row[j] - 1] = j - 1
    return row_col, u[1:], v[1:]


def _lexicographic_min(tight: np.ndarray, row_col: np.ndarray) -> np.ndarray:
    """Lexicographically smallest perfect matching within the ``tight`` edges.

    ``row_col`` must already be a perfect matching inside ``tight``. Rows are
    fixed in order; for each row the smallest column is taken that can be
    reached by rotating the current matching along an alternating cycle of
    unfixed rows.
    """
    n = len(row_col)
    row_col = row_col.copy()
    col_row = np.empty(n, dtype=int)
    col_row[row_col] = np.arange(n)
    fixed_col = np.zeros(n, dtype=bool)
    for i in range(n):
        for j in np.flatnonzero(tight[i]):
            if fixed_col[j]:
                continue
            if row_col[i] == j:
                break
            # row r currently holds j; find an alternating path r -> ... -> row_col[i]
            goal = row_col[i]
            start = col_row[j]
            parent = {start: None}
            stack = [start]
            found_row = None
            while stack and found_row is None:
                r = stack.pop()
                for c in np.flatnonzero(tight[r]):
                    if fixed_col[c] or c == j:
                        continue
                    if c == goal:
                        found_row = r
                        break
                    nr = col_row[c]
                    if nr != i and nr not in parent:
                        parent[nr] = r
                        stack.append(nr)
            if found_row is None:
                continue
            # shift: each row on the path takes the column of the next one
            r, c = found_row, goal
            while r is not None:
                prev_col = row_col[r]
                row_col[r] = c
                col_row[c] = r
                c = prev_col
                r = parent[r]
            row_col[i] = j
            col_row[j] = i
            break
        fixed_col[row_col[i]] = True
    return row_col


def hungarian(cost) -> Assignment:
    """Minimum-cost permutation; ties resolve to the lexicographically smallest."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValidationError(f"cost matrix must be square, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValidationError("cost matrix has non-finite entries")
    n = cost.shape[0]
    if n == 0:
        return Assignment((), 0.0)
    row_col, u, v = _solve(cost)
    scale = max(1.0, float(np.max(np.abs(cost))))
    tight = cost - u[:, None] - v[None, :] <= 1e-9 * scale
    tight[np.arange(n), row_col] = True
    lex = _lexicographic_min(tight, row_col)
    rows = np.arange(n)
    if cost[rows, lex].sum() <= cost[rows, row_col].sum():
        row_col = lex
    sigma = tuple(int(j) for j in row_col)
    total = float(sum(cost[i, j] for i, j in enumerate(sigma)))
    return Assignment(sigma, total)


def match_example(target_embeddings, probs, semantics, mu: float = 0.5) -> Assignment:
    return hungarian(build_cost_matrix(target_embeddings, probs, semantics, mu))
