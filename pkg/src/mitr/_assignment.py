"""Pure-Python min-cost rectangular assignment kernel.

Shortest-augmenting-path algorithm with dual potentials (Jonker-Volgenant
style) for a dense q x m cost matrix with q <= m: every row is assigned to
a distinct column, minimizing total cost. The compiled twin in
_assignment_cy.pyx implements the identical algorithm; lbm picks whichever
imports.
"""

from __future__ import annotations

import numpy as np


def solve_assignment(cost: np.ndarray) -> tuple[np.ndarray, float]:
    """Return (column per row, total cost) for a q x m matrix, q <= m."""
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    q, m = cost.shape
    if q > m:
        raise ValueError(f"solve_assignment: needs rows <= columns, got {q}x{m}")
    if not np.isfinite(cost).all():
        raise ValueError("solve_assignment: cost matrix must be finite")

    # 1-based arrays; column 0 is the virtual root of each augmenting search.
    u = np.zeros(q + 1)
    v = np.zeros(m + 1)
    matched_row = np.zeros(m + 1, dtype=np.int64)
    inf = np.inf

    for i in range(1, q + 1):
        matched_row[0] = i
        j0 = 0
        minv = np.full(m + 1, inf)
        way = np.zeros(m + 1, dtype=np.int64)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = matched_row[j0]
            cur = cost[i0 - 1, :] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            reach = np.where(free, minv[1:], inf)
            j1 = int(np.argmin(reach)) + 1
            delta = reach[j1 - 1]
            u[matched_row[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if matched_row[j0] == 0:
                break
        while j0:
            j_prev = way[j0]
            matched_row[j0] = matched_row[j_prev]
            j0 = j_prev

    cols = np.empty(q, dtype=np.int64)
    for j in range(1, m + 1):
        if matched_row[j]:
            cols[matched_row[j] - 1] = j - 1
    total = float(cost[np.arange(q), cols].sum())
    return cols, total
