"""Local bipartite matching distance between two ordered box sequences.

Boxes are matched like an assignment problem, but each position of the
shorter sequence may only pair with columns inside a window of half-width k
around its index-proportional position in the longer sequence. k=0 pins the
matching to index order; growing k tolerates local disorder. The score is
the optimal matching cost (mean L1 over the four corner coordinates, area
channel excluded) divided by the shorter length; lower is better.

The banded assignment is solved exactly: the constraint matrix is a
transportation structure, so an integral optimum exists and a min-cost
rectangular assignment with forbidden edges (sentinel cost plus a
feasibility post-check) gives the same objective as the linear program.
"""

from __future__ import annotations

import os

import numpy as np

if os.environ.get("MITR_PURE_PYTHON"):
    from . import _assignment as _kernel
else:
    try:
        from . import _assignment_cy as _kernel  # type: ignore[attr-defined]
    except ImportError:
        from . import _assignment as _kernel

KERNEL = "cython" if _kernel.__name__.endswith("_cy") else "python"

FORBIDDEN_COST = 1e9


class LbmError(ValueError):
    pass


def _boxes(trace) -> np.ndarray:
    arr = np.asarray([tuple(b) for b in trace], dtype=np.float64)
    if arr.size == 0:
        raise LbmError("empty trace")
    if arr.ndim != 2 or arr.shape[1] not in (4, 5):
        raise LbmError(f"expected boxes with 4 or 5 channels, got shape {arr.shape}")
    return arr[:, :4]


def band_mask(q: int, m: int, k: int) -> np.ndarray:
    """(q, m) boolean matrix of allowed pairs.

    Row i allows columns j with floor((i-k)*m/q) <= j < (i+1+k)*m/q. The
    upper comparison is evaluated in exact integer arithmetic
    (j*q < (i+1+k)*m), never in floating point.
    """
    if not 1 <= q <= m:
        raise LbmError(f"band_mask: needs 1 <= q <= m, got q={q}, m={m}")
    if k < 0:
        raise LbmError(f"band_mask: window must be >= 0, got {k}")
    mask = np.zeros((q, m), dtype=bool)
    for i in range(q):
        lo = max(0, ((i - k) * m) // q)
        hi = min(m, -((-(i + 1 + k) * m) // q))  # ceil((i+1+k)*m/q)
        mask[i, lo:hi] = True
    return mask


def cost_matrix(a, b) -> np.ndarray:
    """C[i, j] = mean L1 distance over the four corner coordinates between
    box i of `a` and box j of `b`."""
    av, bv = _boxes(a), _boxes(b)
    return np.abs(av[:, None, :] - bv[None, :, :]).mean(axis=2)


def lbm_score(gt, pred, k: int) -> float:
    """Exact banded matching distance; symmetric in its trace arguments."""
    a, b = _boxes(gt), _boxes(pred)
    if len(a) > len(b):
        a, b = b, a
    q, m = len(a), len(b)
    cost = np.abs(a[:, None, :] - b[None, :, :]).mean(axis=2)
    allowed = band_mask(q, m, k)
    banded = np.where(allowed, cost, FORBIDDEN_COST)
    cols, total = _kernel.solve_assignment(banded)
    chosen = banded[np.arange(q), cols]
    if (chosen >= FORBIDDEN_COST / 2).any():
        raise LbmError("banded matching infeasible (forbidden edge selected)")
    return total / q


def lbm_brute_force(gt, pred, k: int) -> float:
    """Exhaustive minimum over band-respecting injective assignments.

    Small instances only; this is the oracle the solver is checked against.
    """
    a, b = _boxes(gt), _boxes(pred)
    if len(a) > len(b):
        a, b = b, a
    q, m = len(a), len(b)
    if q > 8 or m > 8:
        raise LbmError(f"brute force guard: sizes {q}x{m} exceed 8x8")
    cost = np.abs(a[:, None, :] - b[None, :, :]).mean(axis=2)
    allowed = band_mask(q, m, k)

    best = np.inf

    def assign(row: int, used: int, acc: float):
        nonlocal best
        if acc >= best:
            return
        if row == q:
            best = acc
            return
        for j in range(m):
            if allowed[row, j] and not used & (1 << j):
                assign(row + 1, used | (1 << j), acc + cost[row, j])

    assign(0, 0, 0.0)
    if not np.isfinite(best):
        raise LbmError("brute force found no feasible assignment")
    return best / q
