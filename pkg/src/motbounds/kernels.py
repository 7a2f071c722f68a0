"""Log-domain tensor operations behind the Sinkhorn and Greenkhorn solvers.

Both kernels represent the entropic iterate ``gamma = exp(-eta C + m(1) + ... + m(K))``
implicitly through the potentials ``m`` and expose the same handful of
operations: log marginals, the c-transform used to repair dual potentials,
and rounding to an exactly feasible coupling.

:class:`DenseKernel` works on a materialised :class:`~motbounds.cost.CostTensor`
for any K. :class:`FactoredKernel` handles three margins with a pairwise
(quadratic) cost without ever forming the ``n1 x n2 x n3`` tensor: every sum
over one axis becomes a matrix product, so memory stays quadratic in ``n``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from .cost import DEFAULT_CELL_CAP, CostTensor, FactoredCost, _check_cap
from .measures import MarginalSystem

TINY_SUM = 1e-280
ROUND_SKIP = 1e-14
UNDERFLOW = 1e-290
LSE_SLACK = 50.0
Array = NDArray[np.float64]


def logsumexp(a: Array, axis=None) -> Array:
    """Max-stabilised ``log(sum(exp(a)))``; rows that are entirely ``-inf`` give ``-inf``."""
    top = np.max(a, axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - top), axis=axis, keepdims=True)) + top
    return np.squeeze(out, axis=axis) if axis is not None else out.reshape(())[()]


def _bcast(v: Array, axis: int, K: int) -> Array:
    shape = [1] * K
    shape[axis] = v.shape[0]
    return v.reshape(shape)


def _others(k: int, K: int) -> tuple[int, ...]:
    return tuple(a for a in range(K) if a != k)


def round_dense(gamma: Array, mus: Sequence[Array]) -> Array:
    """Scale ``gamma`` down margin by margin, then add the rank-1 correction.

    Returns a new array whose k-th marginal equals ``mus[k]``.
    """
    K = gamma.ndim
    out = np.array(gamma, dtype=float)
    np.maximum(out, 0.0, out=out)
    for k in range(K):
        marg = out.sum(axis=_others(k, K))
        with np.errstate(divide="ignore", invalid="ignore"):
            v = np.where(marg > mus[k], mus[k] / np.where(marg > 0, marg, 1.0), 1.0)
        out *= _bcast(v, k, K)
    errs = [np.maximum(mus[k] - out.sum(axis=_others(k, K)), 0.0) for k in range(K)]
    norm = float(errs[-1].sum())
    if norm >= ROUND_SKIP:
        rank1 = errs[0] / norm ** (K - 1)
        for k in range(1, K):
            rank1 = np.multiply.outer(rank1, errs[k])
        out += rank1
    return out


class DenseKernel:
    """Kernel over a dense shifted cost tensor."""

    def __init__(self, cost: CostTensor, sys: MarginalSystem):
        if tuple(cost.shape) != tuple(sys.shape):
            raise ValueError(f"cost shape {cost.shape} does not match marginals {sys.shape}")
        self.C = np.asarray(cost.values, dtype=float)
        self.K = self.C.ndim
        self.shape = self.C.shape
        self.mus = [np.asarray(w) for w in sys.weights]

    def log_tensor(self, m: Sequence[Array], eta: float) -> Array:
        L = -eta * self.C
        for k in range(self.K):
            L += _bcast(m[k], k, self.K)
        return L

    def log_marginals(self, m: Sequence[Array], eta: float) -> list[Array]:
        L = self.log_tensor(m, eta)
        top = float(L.max())
        if not np.isfinite(top):
            return [np.full(n, np.nan) for n in self.shape]
        P = np.exp(L - top)
        out = []
        for k in range(self.K):
            s = P.sum(axis=_others(k, self.K))
            with np.errstate(divide="ignore"):
                g = np.log(s) + top
            low = np.nonzero(s < TINY_SUM)[0]
            if low.size:
                g[low] = logsumexp(np.take(L, low, axis=k), axis=_others(k, self.K))
            out.append(g)
        return out

    def slice_marginals(self, m: Sequence[Array], eta: float, k: int, i: int) -> list[Array | None]:
        """Linear marginals of the cells with index ``i`` on axis ``k``.

        Entry ``k`` of the returned list is ``None``; the others are vectors
        over their own axis.
        """
        K = self.K
        S = -eta * np.take(self.C, i, axis=k) + m[k][i]
        rest = _others(k, K)
        for pos, l in enumerate(rest):
            S = S + _bcast(m[l], pos, K - 1)
        P = np.exp(S)
        out: list[Array | None] = [None] * K
        for pos, l in enumerate(rest):
            out[l] = P.sum(axis=_others(pos, K - 1)) if K > 1 else P
        return out

    def c_transform(self, f: Sequence[Array], k: int) -> Array:
        L = np.array(self.C)
        for l in range(self.K):
            if l != k:
                L -= _bcast(f[l], l, self.K)
        return L.min(axis=_others(k, self.K))

    def round(self, m: Sequence[Array], eta: float, cell_cap: int = DEFAULT_CELL_CAP):
        gamma = np.exp(self.log_tensor(m, eta))
        hat = round_dense(gamma, self.mus)
        return DenseCoupling(hat), float(np.sum(hat * self.C))


@dataclass(frozen=True)
class DenseCoupling:
    """A materialised coupling tensor."""

    values: Array

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def mass(self) -> float:
        return float(self.values.sum())

    def marginals(self) -> list[Array]:
        K = self.values.ndim
        return [self.values.sum(axis=_others(k, K)) for k in range(K)]

    def dense(self, cell_cap: int = DEFAULT_CELL_CAP) -> Array:
        return self.values


def lse_mat(X: Array, Y: Array, views: Sequence[tuple[Array, int]] = ()) -> Array:
    """``out[i, j] = log sum_l exp(X[i, l] + Y[j, l])`` via one matrix product.

    Rows are max-stabilised before exponentiating; entries whose product
    underflows are recomputed exactly in the log domain. ``views`` lists how
    the caller consumes the result, as pairs ``(A, axis)`` meaning a
    log-sum-exp of ``A + out`` along ``axis``. An underflowed entry that sits
    at least ``LSE_SLACK`` below the running maximum in every view cannot move
    those sums by more than ``n * exp(-LSE_SLACK)`` relative, and is left as is.
    """
    xr = X.max(axis=1, keepdims=True)
    yr = Y.max(axis=1, keepdims=True)
    xr = np.where(np.isfinite(xr), xr, 0.0)
    yr = np.where(np.isfinite(yr), yr, 0.0)
    P = np.exp(X - xr) @ np.exp(Y - yr).T
    with np.errstate(divide="ignore"):
        out = np.log(P) + xr + yr.T
    bad = P < UNDERFLOW
    if bad.any() and views:
        # the true value of an underflowed entry is below this bound
        bound = xr + yr.T + math.log(UNDERFLOW * X.shape[1])
        needed = np.zeros_like(bad)
        for A, axis in views:
            top = np.max(np.where(bad, -np.inf, A + out), axis=axis, keepdims=True)
            needed |= bad & ~(A + bound < top - LSE_SLACK)
        bad = needed
    if bad.any():
        ii, jj = np.nonzero(bad)
        for start in range(0, ii.size, 4096):
            sl = slice(start, start + 4096)
            out[ii[sl], jj[sl]] = logsumexp(X[ii[sl]] + Y[jj[sl]], axis=1)
    return out


def _min_plus3(ckp: Array, ckq: Array, base: Array) -> Array:
    """``out[i] = min_{j,l} ckp[i, j] + ckq[i, l] + base[j, l]``, one row of i at a time."""
    out = np.empty(ckp.shape[0])
    buf = np.empty_like(base)
    for i in range(ckp.shape[0]):
        np.add(base, ckq[i][None, :], out=buf)
        out[i] = np.min(ckp[i] + buf.min(axis=1))
    return out


class FactoredKernel:
    """Kernel for K = 3 with cost ``u0 + u1 + u2 + c01 + c02 + c12``."""

    def __init__(self, cost: FactoredCost, sys: MarginalSystem):
        if cost.K != 3:
            raise ValueError("the factored kernel supports exactly three margins")
        if tuple(cost.shape) != tuple(sys.shape):
            raise ValueError(f"cost shape {cost.shape} does not match marginals {sys.shape}")
        self.cost = cost
        self.K = 3
        self.shape = cost.shape
        self.u = [np.asarray(x) for x in cost.unary]
        self.c01 = cost.pairs[(0, 1)]
        self.c02 = cost.pairs[(0, 2)]
        self.c12 = cost.pairs[(1, 2)]
        self.mus = [np.asarray(w) for w in sys.weights]
        self._eta = None

    def _scaled(self, eta: float):
        if self._eta != eta:
            self._E = (-eta * self.c01, -eta * self.c02, -eta * self.c12)
            self._eta = eta
        return self._E

    def _s(self, m, eta):
        return [m[k] - eta * self.u[k] for k in range(3)]

    def _inner(self, s, eta):
        E01, E02, E12 = self._scaled(eta)
        M01 = lse_mat(E02 + s[2][None, :], E12,       # (i, j), summed over l
                      [(E01 + s[1][None, :], 1), (E01 + s[0][:, None], 0)])
        M02 = lse_mat(E01 + s[1][None, :], E12.T,     # (i, l), summed over j
                      [(E02 + s[2][None, :], 1), (E02 + s[0][:, None], 0)])
        return M01, M02

    def log_marginals(self, m: Sequence[Array], eta: float) -> list[Array]:
        s = self._s(m, eta)
        E01, E02, _ = self._scaled(eta)
        M01, M02 = self._inner(s, eta)
        Z = E01 + M01
        g0 = s[0] + logsumexp(Z + s[1][None, :], axis=1)
        g1 = s[1] + logsumexp(Z + s[0][:, None], axis=0)
        g2 = s[2] + logsumexp(E02 + M02 + s[0][:, None], axis=0)
        return [g0, g1, g2]

    def _pair_logs(self, s, eta):
        E01, E02, E12 = self._scaled(eta)
        M01, M02 = self._inner(s, eta)
        M12 = lse_mat((E01 + s[0][:, None]).T, E02.T,  # (j, l), summed over i
                      [(E12 + s[2][None, :], 1), (E12 + s[1][:, None], 0)])
        P01 = s[0][:, None] + s[1][None, :] + E01 + M01
        P02 = s[0][:, None] + s[2][None, :] + E02 + M02
        P12 = s[1][:, None] + s[2][None, :] + E12 + M12
        return P01, P02, P12

    def expected_cost(self, m: Sequence[Array], eta: float) -> float:
        s = self._s(m, eta)
        P01, P02, P12 = self._pair_logs(s, eta)
        val = (np.sum(np.exp(P01) * self.c01) + np.sum(np.exp(P02) * self.c02)
               + np.sum(np.exp(P12) * self.c12))
        g = [logsumexp(P01, axis=1), logsumexp(P01, axis=0), logsumexp(P02, axis=0)]
        return float(val + sum(np.exp(gk) @ uk for gk, uk in zip(g, self.u)))

    def _pair(self, k: int, l: int) -> Array:
        c = {(0, 1): self.c01, (0, 2): self.c02, (1, 2): self.c12}
        return c[(k, l)] if k < l else c[(l, k)].T

    def c_transform(self, f: Sequence[Array], k: int) -> Array:
        p, q = _others(k, 3)
        base = (self._pair(p, q) + (self.u[p] - f[p])[:, None]
                + (self.u[q] - f[q])[None, :])
        ckp = np.ascontiguousarray(self._pair(k, p))
        ckq = np.ascontiguousarray(self._pair(k, q))
        return _min_plus3(ckp, ckq, np.ascontiguousarray(base)) + self.u[k]

    def round(self, m: Sequence[Array], eta: float, cell_cap: int = DEFAULT_CELL_CAP):
        m = [np.array(x) for x in m]
        for k in range(3):
            g = self.log_marginals(m, eta)[k]
            with np.errstate(divide="ignore"):
                logmu = np.log(self.mus[k])
            m[k] += np.minimum(logmu - g, 0.0)
        s = self._s(m, eta)
        P01, P02, P12 = self._pair_logs(s, eta)
        marg = [np.exp(logsumexp(P01, axis=1)), np.exp(logsumexp(P01, axis=0)),
                np.exp(logsumexp(P02, axis=0))]
        value = (np.sum(np.exp(P01) * self.c01) + np.sum(np.exp(P02) * self.c02)
                 + np.sum(np.exp(P12) * self.c12)
                 + sum(gk @ uk for gk, uk in zip(marg, self.u)))
        errs = [np.maximum(mu - g, 0.0) for mu, g in zip(self.mus, marg)]
        norm = float(errs[2].sum())
        if norm >= ROUND_SKIP:
            tot = [float(e.sum()) for e in errs]
            rank1 = (errs[0] @ self.u[0] * tot[1] * tot[2]
                     + errs[1] @ self.u[1] * tot[0] * tot[2]
                     + errs[2] @ self.u[2] * tot[0] * tot[1]
                     + errs[0] @ self.c01 @ errs[1] * tot[2]
                     + errs[0] @ self.c02 @ errs[2] * tot[1]
                     + errs[1] @ self.c12 @ errs[2] * tot[0])
            value += rank1 / norm**2
        else:
            errs = None
        coupling = FactoredCoupling(tuple(s), eta, (self.c01, self.c02, self.c12), errs, norm,
                                    tuple(self.mus))
        return coupling, float(value)


@dataclass(frozen=True)
class FactoredCoupling:
    """Rounded coupling ``exp(s0 + s1 + s2 - eta * pairs) + rank-1`` kept in factored form.

    ``marginals()`` returns the targets exactly (rounding guarantees them);
    ``dense()`` materialises the tensor when it fits under the cell cap.
    """

    logs: tuple[Array, Array, Array]
    eta: float
    pairs: tuple[Array, Array, Array]
    errs: list[Array] | None
    err_norm: float
    mus: tuple[Array, ...]

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(s.shape[0] for s in self.logs)

    @property
    def mass(self) -> float:
        return 1.0

    def marginals(self) -> list[Array]:
        return [np.array(mu) for mu in self.mus]

    def dense(self, cell_cap: int = DEFAULT_CELL_CAP) -> Array:
        _check_cap(self.shape, cell_cap)
        s0, s1, s2 = self.logs
        c01, c02, c12 = self.pairs
        L = (s0[:, None, None] + s1[None, :, None] + s2[None, None, :]
             - self.eta * (c01[:, :, None] + c02[:, None, :] + c12[None, :, :]))
        out = np.exp(L)
        if self.errs is not None:
            e0, e1, e2 = self.errs
            out += np.multiply.outer(np.multiply.outer(e0, e1), e2) / self.err_norm**2
        return out

    @property
    def values(self) -> Array:
        return self.dense()
