"""Minimum-cost bipartite assignment (shortest augmenting path, O(n^3)).

Hand-rolled instead of scipy so tie handling is deterministic and auditable:
rows (prediction indices) are processed in increasing order and among
equal-reduced-cost columns the scan prefers unmatched ones, then the earliest
in scan order, so repeated runs on the same matrix always return the same
assignment.  Returned pairs are sorted by prediction index.
"""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Assignment:
    """Result of a rectangular assignment problem.

    pairs: (prediction_index, target_index) tuples, sorted by prediction index,
        exactly min(n_pred, n_target) of them.
    unmatched_predictions: prediction indices not present in pairs, ascending.
    """

    pairs: list = field(default_factory=list)
    unmatched_predictions: list = field(default_factory=list)

    def total_cost(self, cost):
        cost = np.asarray(cost, dtype=np.float64)
        return float(sum(cost[i, j] for i, j in self.pairs))


def _solve_rows_leq_cols(cost):
    # Jonker-Volgenant style augmenting-path search with dual potentials.
    # Requires n <= m; returns col4row of length n.
    n, m = cost.shape
    u = np.zeros(n, dtype=np.float64)
    v = np.zeros(m, dtype=np.float64)
    col4row = np.full(n, -1, dtype=np.int64)
    row4col = np.full(m, -1, dtype=np.int64)

    for cur_row in range(n):
        shortest = np.full(m, np.inf, dtype=np.float64)
        path = np.full(m, -1, dtype=np.int64)
        scanned_rows = np.zeros(n, dtype=bool)
        scanned_cols = np.zeros(m, dtype=bool)
        remaining = list(range(m))
        min_val = 0.0
        i = cur_row
        sink = -1
        while sink == -1:
            scanned_rows[i] = True
            lowest = np.inf
            index = -1
            for it, j in enumerate(remaining):
                r = min_val + cost[i, j] - u[i] - v[j]
                if r < shortest[j]:
                    path[j] = i
                    shortest[j] = r
                if shortest[j] < lowest or (
                    shortest[j] == lowest and row4col[j] == -1
                ):
                    lowest = shortest[j]
                    index = it
            min_val = lowest
            j = remaining[index]
            if row4col[j] == -1:
                sink = j
            else:
                i = row4col[j]
            scanned_cols[j] = True
            del remaining[index]

        u[cur_row] += min_val
        for k in range(n):
            if scanned_rows[k] and k != cur_row:
                u[k] += min_val - shortest[col4row[k]]
        for j in range(m):
            if scanned_cols[j]:
                v[j] -= min_val - shortest[j]

        # flip matched/unmatched edges along the alternating path to sink
        j = sink
        while True:
            i = path[j]
            row4col[j] = i
            col4row[i], j = j, col4row[i]
            if i == cur_row:
                break
    return col4row


def hungarian(cost) -> Assignment:
    """Solve min-cost assignment on an n_pred x n_target matrix.

    Costs must be finite; NaN or inf raises ValueError.  Exactly
    min(n, m) pairs are returned; with n == 0 or m == 0 the result is empty.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost matrix must be 2-d, got shape {cost.shape}")
    n, m = cost.shape
    if n == 0 or m == 0:
        return Assignment(pairs=[], unmatched_predictions=list(range(n)))
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix contains non-finite entries")

    if n <= m:
        col4row = _solve_rows_leq_cols(cost)
        pairs = [(i, int(col4row[i])) for i in range(n)]
    else:
        row4col = _solve_rows_leq_cols(np.ascontiguousarray(cost.T))
        pairs = [(int(row4col[j]), j) for j in range(m)]
    pairs.sort()
    matched = {i for i, _ in pairs}
    unmatched = [i for i in range(n) if i not in matched]
    return Assignment(pairs=pairs, unmatched_predictions=unmatched)
