# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled min-cost rectangular assignment kernel.

Same shortest-augmenting-path algorithm as _assignment.py, with the inner
relaxation loop in C. Kept in lockstep with the pure-Python twin; the test
suite asserts both produce identical objective values.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def solve_assignment(cost):
    """Return (column per row, total cost) for a q x m matrix, q <= m."""
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] c = \
        np.ascontiguousarray(cost, dtype=np.float64)
    cdef Py_ssize_t q = c.shape[0]
    cdef Py_ssize_t m = c.shape[1]
    if q > m:
        raise ValueError(f"solve_assignment: needs rows <= columns, got {q}x{m}")
    if not np.isfinite(cost).all():
        raise ValueError("solve_assignment: cost matrix must be finite")

    cdef cnp.ndarray[cnp.float64_t, ndim=1] u = np.zeros(q + 1)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] v = np.zeros(m + 1)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] minv = np.empty(m + 1)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] matched_row = np.zeros(m + 1, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] way = np.zeros(m + 1, dtype=np.int64)
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] used = np.zeros(m + 1, dtype=np.uint8)

    cdef Py_ssize_t i, j, j0, j1, i0
    cdef double inf = float("inf")
    cdef double cur, delta

    for i in range(1, q + 1):
        matched_row[0] = i
        j0 = 0
        for j in range(m + 1):
            minv[j] = inf
            way[j] = 0
            used[j] = 0
        while True:
            used[j0] = 1
            i0 = matched_row[j0]
            delta = inf
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = c[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[matched_row[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if matched_row[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            matched_row[j0] = matched_row[j1]
            j0 = j1

    cols = np.empty(q, dtype=np.int64)
    for j in range(1, m + 1):
        if matched_row[j]:
            cols[matched_row[j] - 1] = j - 1
    total = float(c[np.arange(q), cols].sum())
    return cols, total
