"""Minimum-cost bipartite assignment (Hungarian algorithm).

Shortest-augmenting-path formulation with dual potentials, O(n^3).
Rectangular inputs are padded to square with a large sentinel; every complete
matching of the padded matrix uses the same number of sentinel cells, so the
optimum over real cells is unaffected.  The solver is fully deterministic:
equal-cost alternatives always resolve the same way for a given matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError


@dataclass
class Assignment:
    """One-to-one pairing of predictions to ground truths.

    ``pairs`` holds (prediction index, ground-truth index) sorted by
    prediction index; exactly min(N, M) pairs.  ``unmatched`` lists the
    prediction indices left without a ground truth.
    """

    pairs: list[tuple[int, int]] = field(default_factory=list)
    unmatched: list[int] = field(default_factory=list)

    def total_cost(self, cost: np.ndarray) -> float:
        return float(sum(cost[i, j] for i, j in self.pairs))


def hungarian(cost: np.ndarray) -> Assignment:
    """Assignment minimizing total cost over all injections of the smaller side."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ContractError(f"hungarian: cost must be 2-D, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ContractError("hungarian: non-finite cost entry")
    n_pred, n_gt = cost.shape
    if n_pred == 0 or n_gt == 0:
        return Assignment(pairs=[], unmatched=list(range(n_pred)))
    n = max(n_pred, n_gt)
    sentinel = float(cost.max()) + 1.0
    square = np.full((n, n), sentinel)
    square[:n_pred, :n_gt] = cost
    row_of_col = _solve_square(square)
    pairs = []
    unmatched = []
    col_of_row = {int(r): c for c, r in enumerate(row_of_col)}
    for i in range(n_pred):
        j = col_of_row[i]
        if j < n_gt:
            pairs.append((i, j))
        else:
            unmatched.append(i)
    return Assignment(pairs=pairs, unmatched=unmatched)


def _solve_square(a: np.ndarray) -> np.ndarray:
    """Rows assigned one by one along shortest augmenting paths.

    Returns row_of_col: the row index matched to each column.  Index 0 is a
    virtual column used to seed each augmentation (classic potentials scheme).
    """
    n = a.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    row_of_col = np.zeros(n + 1, dtype=np.int64)  # 1-based rows; 0 = free
    parent = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        row_of_col[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = row_of_col[j0]
            free = ~used
            free[0] = False
            cols = np.nonzero(free)[0]
            reduced = a[i0 - 1, cols - 1] - u[i0] - v[cols]
            better = reduced < minv[cols]
            minv[cols] = np.where(better, reduced, minv[cols])
            parent[cols[better]] = j0
            k = int(np.argmin(minv[cols]))
            delta = minv[cols][k]
            j1 = int(cols[k])
            u[row_of_col[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if row_of_col[j0] == 0:
                break
        while j0:
            j1 = int(parent[j0])
            row_of_col[j0] = row_of_col[j1]
            j0 = j1
    return row_of_col[1:] - 1


def brute_force_assignment(cost: np.ndarray) -> float:
    """Exhaustive minimum over all injections; oracle for small matrices."""
    import itertools

    cost = np.asarray(cost, dtype=np.float64)
    n_pred, n_gt = cost.shape
    if n_pred == 0 or n_gt == 0:
        return 0.0
    best = np.inf
    if n_pred <= n_gt:
        for perm in itertools.permutations(range(n_gt), n_pred):
            best = min(best, sum(cost[i, j] for i, j in enumerate(perm)))
    else:
        for perm in itertools.permutations(range(n_pred), n_gt):
            best = min(best, sum(cost[i, j] for j, i in enumerate(perm)))
    return float(best)
