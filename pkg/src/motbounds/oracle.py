"""Reference answers for small problems.

:func:`lp_exact` solves the transport linear program exactly with a
self-contained two-phase dense simplex (Bland's rule), so solver tests do not
depend on any external LP code. :func:`permutation_min` is a second,
independent oracle for two equal uniform margins, and :func:`gaussian_mw2`
is the closed form for centred one-dimensional Gaussian margins.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from .cost import CostTensor, _check_cap
from .kernels import DenseCoupling
from .measures import MarginalSystem

ORACLE_CELL_CAP = 10_000
PIVOT_TOL = 1e-11
FEAS_TOL = 1e-9


@dataclass(frozen=True)
class LpSolution:
    """Exact LP optimum (signed, shift removed) and an optimal vertex."""

    value: float
    vertex_coupling: DenseCoupling | None
    status: str
    pivots: int = 0


def marginal_constraints(shape: Sequence[int], mus: Sequence[NDArray]) -> tuple[NDArray, NDArray]:
    """Equality rows ``A x = b`` over the flattened tensor.

    The last row of every block after the first is dropped: each block already
    fixes the total mass, so those rows are implied by the rest.
    """
    K = len(shape)
    N = int(np.prod(shape))
    idx = np.arange(N).reshape(shape)
    rows, rhs = [], []
    for k in range(K):
        last = shape[k] - 1 if k > 0 else shape[k]
        for i in range(shape[k]):
            if i == last:
                continue
            row = np.zeros(N)
            row[np.take(idx, i, axis=k).ravel()] = 1.0
            rows.append(row)
            rhs.append(float(mus[k][i]))
    return np.array(rows), np.array(rhs)


class _Tableau:
    """Dense simplex tableau ``[A | b]`` with an objective row, Bland pivoting."""

    def __init__(self, A: NDArray, b: NDArray, max_pivots: int):
        self.T = np.hstack([A, b[:, None]]).astype(float)
        self.basis = [-1] * A.shape[0]
        self.pivots = 0
        self.max_pivots = max_pivots

    def pivot(self, r: int, c: int):
        T = self.T
        T[r] /= T[r, c]
        col = T[:, c].copy()
        col[r] = 0.0
        T -= np.outer(col, T[r])
        self.basis[r] = c
        self.pivots += 1

    def run(self, obj: NDArray, allowed: NDArray) -> str:
        """Minimise ``obj . x`` over the current basis; returns a status string."""
        T = self.T
        while True:
            reduced = obj[:-1] - self._basic_costs(obj) @ T[:, :-1]
            candidates = np.nonzero(allowed & (reduced < -PIVOT_TOL))[0]
            if candidates.size == 0:
                return "optimal"
            c = int(candidates[0])
            colv = T[:, c]
            pos = np.nonzero(colv > PIVOT_TOL)[0]
            if pos.size == 0:
                return "unbounded"
            ratios = T[pos, -1] / colv[pos]
            best = ratios.min()
            ties = pos[ratios <= best + 1e-14]
            r = int(min(ties, key=lambda row: self.basis[row]))
            if self.pivots >= self.max_pivots:
                return "numerical_failure"
            self.pivot(r, c)

    def _basic_costs(self, obj: NDArray) -> NDArray:
        return np.array([obj[j] for j in self.basis])


def _simplex(c: NDArray, A: NDArray, b: NDArray, max_pivots: int):
    m, n = A.shape
    neg = b < 0
    A = np.where(neg[:, None], -A, A)
    b = np.abs(b)
    tab = _Tableau(np.hstack([A, np.eye(m)]), b, max_pivots)
    tab.basis = list(range(n, n + m))
    phase1 = np.concatenate([np.zeros(n), np.ones(m), [0.0]])
    status = tab.run(phase1, np.ones(n + m, dtype=bool))
    if status == "numerical_failure":
        return status, None, tab.pivots
    if tab.T[:, -1] @ np.array([1.0 if j >= n else 0.0 for j in tab.basis]) > FEAS_TOL:
        return "infeasible", None, tab.pivots
    # drive artificial variables out of the basis; rows with no usable pivot are redundant
    keep = []
    for r in range(m):
        if tab.basis[r] >= n:
            nz = np.nonzero(np.abs(tab.T[r, :n]) > PIVOT_TOL)[0]
            if nz.size == 0:
                continue
            tab.pivot(r, int(nz[0]))
        keep.append(r)
    tab.T = tab.T[keep]
    tab.basis = [tab.basis[r] for r in keep]
    allowed = np.concatenate([np.ones(n, dtype=bool), np.zeros(m, dtype=bool)])
    obj = np.concatenate([c, np.zeros(m), [0.0]])
    status = tab.run(obj, allowed)
    if status != "optimal":
        return ("numerical_failure" if status == "unbounded" else status), None, tab.pivots
    x = np.zeros(n + m)
    for r, j in enumerate(tab.basis):
        x[j] = tab.T[r, -1]
    return "optimal", x[:n], tab.pivots


def lp_exact(cost: CostTensor, sys: MarginalSystem, max_pivots: int | None = None) -> LpSolution:
    """Exact optimum of ``min <C, gamma>`` over couplings of ``sys``.

    Raises:
        CellCapError: the tensor has more than 10^4 cells.
        ValueError: shapes disagree.
    """
    if tuple(cost.shape) != tuple(sys.shape):
        raise ValueError(f"cost shape {cost.shape} does not match marginals {sys.shape}")
    _check_cap(cost.shape, ORACLE_CELL_CAP)
    A, b = marginal_constraints(cost.shape, sys.weights)
    c = np.asarray(cost.values, dtype=float).ravel()
    cap = max_pivots if max_pivots is not None else 50 * (A.shape[0] + A.shape[1]) + 1000
    status, x, pivots = _simplex(c, A, b, cap)
    if status != "optimal":
        return LpSolution(math.nan, None, status, pivots)
    x = np.maximum(x, 0.0)
    gamma = x.reshape(cost.shape)
    value = float(c @ x) - cost.shift
    return LpSolution(value, DenseCoupling(gamma), "optimal", pivots)


def permutation_min(cost: CostTensor) -> float:
    """Minimum over permutation couplings of an ``n x n`` cost with uniform margins.

    By Birkhoff's theorem this is the transport optimum; kept to ``n <= 8``.
    """
    if cost.K != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError("permutation_min needs a square two-margin cost")
    n = cost.shape[0]
    if n > 8:
        raise ValueError("permutation enumeration is limited to n <= 8")
    C = np.asarray(cost.values)
    rows = np.arange(n)
    best = min(float(C[rows, list(p)].sum()) for p in itertools.permutations(range(n)))
    return best / n - cost.shift


def gaussian_mw2(sigmas: Sequence[float]) -> float:
    """Closed form ``(1/K^2) * max(2 max sigma - sum sigma, 0)^2`` for centred Gaussians."""
    s = [float(x) for x in sigmas]
    if len(s) < 1:
        raise ValueError("need at least one standard deviation")
    if any(not (x > 0 and math.isfinite(x)) for x in s):
        raise ValueError(f"standard deviations must be positive, got {s}")
    K = len(s)
    return max(2.0 * max(s) - sum(s), 0.0) ** 2 / K**2


def product_coupling_value(cost: CostTensor, sys: MarginalSystem) -> float:
    """Cost of the independent coupling ``mu(1) x ... x mu(K)`` (shift removed)."""
    val = np.asarray(cost.values, dtype=float)
    for w in reversed(sys.weights):
        val = val @ w
    return float(val) - cost.shift
