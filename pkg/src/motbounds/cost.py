"""Cost specifications and the cost tensors built from them.

A :class:`CostSpec` declares the estimand ``E_gamma[l(Y(1), ..., Y(K))]``.
Every quadratic kind is reduced to a single ``(K*d, K*d)`` matrix ``Q`` over
the stacked outcome vector ``z = (y(1), ..., y(K))`` so that one builder
serves all of them:

* ``mw2``: ``||sum_k y(k) / K||^2``, i.e. ``Q = (11^T / K^2) kron I_d``
* ``qmw``: ``sum_ij a_ij <y(i), y(j)>``, i.e. ``Q = A kron I_d``
* ``contrast``: ``||sum_k beta_k y(k)||^2``, i.e. ``Q = beta beta^T kron I_d``
* ``quadratic_general``: ``z^T Q z`` for an arbitrary symmetric ``Q``

``custom`` (a Python callable) and ``custom_expr`` (see :mod:`._expr`) cover
non-quadratic objectives and are only available as dense tensors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from ._expr import CellExpression
from .errors import CellCapError, SchemaError
from .measures import MarginalSystem

DEFAULT_CELL_CAP = 10**7
SYMMETRY_TOL = 1e-12

QUADRATIC_KINDS = ("mw2", "qmw", "contrast", "quadratic_general")
KINDS = QUADRATIC_KINDS + ("custom", "custom_expr")


def _sym_matrix(m: ArrayLike | None, name: str) -> NDArray[np.float64] | None:
    if m is None:
        return None
    a = np.array(m, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise SchemaError(f"{name} must be a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise SchemaError(f"{name} has non-finite entries")
    if np.max(np.abs(a - a.T), initial=0.0) > SYMMETRY_TOL:
        raise SchemaError(f"{name} is not symmetric")
    a = 0.5 * (a + a.T)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class CostSpec:
    """Declarative objective. ``sign`` is ``"min"`` or ``"max"``."""

    kind: str
    sign: str = "min"
    A: NDArray[np.float64] | None = None
    beta: NDArray[np.float64] | None = None
    Q: NDArray[np.float64] | None = None
    func: Callable[[list[NDArray[np.float64]]], float] | None = field(default=None, compare=False)
    expr: str | None = None
    label: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"unknown cost kind {self.kind!r}; expected one of {KINDS}")
        if self.sign not in ("min", "max"):
            raise SchemaError(f"sign must be 'min' or 'max', got {self.sign!r}")
        object.__setattr__(self, "A", _sym_matrix(self.A, "A"))
        object.__setattr__(self, "Q", _sym_matrix(self.Q, "Q"))
        if self.beta is not None:
            b = np.array(self.beta, dtype=float).ravel()
            if not np.all(np.isfinite(b)):
                raise SchemaError("beta has non-finite entries")
            b.setflags(write=False)
            object.__setattr__(self, "beta", b)
        required = {"qmw": "A", "contrast": "beta", "quadratic_general": "Q",
                    "custom": "func", "custom_expr": "expr"}.get(self.kind)
        if required and getattr(self, required) is None:
            raise SchemaError(f"cost kind {self.kind!r} requires {required!r}")
        if self.kind == "custom_expr":
            object.__setattr__(self, "_parsed", CellExpression(self.expr))

    # -- constructors -------------------------------------------------------
    @classmethod
    def mw2(cls, sign: str = "min") -> CostSpec:
        return cls("mw2", sign=sign)

    @classmethod
    def qmw(cls, A: ArrayLike, sign: str = "min") -> CostSpec:
        return cls("qmw", sign=sign, A=A)

    @classmethod
    def contrast(cls, beta: ArrayLike, sign: str = "min") -> CostSpec:
        return cls("contrast", sign=sign, beta=beta)

    @classmethod
    def quadratic(cls, Q: ArrayLike, sign: str = "min", label: str | None = None) -> CostSpec:
        return cls("quadratic_general", sign=sign, Q=Q, label=label)

    @classmethod
    def custom(cls, func: Callable, sign: str = "min") -> CostSpec:
        return cls("custom", sign=sign, func=func)

    @classmethod
    def expression(cls, source: str, sign: str = "min") -> CostSpec:
        return cls("custom_expr", sign=sign, expr=source)

    # -- derived ------------------------------------------------------------
    @property
    def is_quadratic(self) -> bool:
        return self.kind in QUADRATIC_KINDS

    def flipped(self) -> CostSpec:
        """Same objective with the optimisation direction exchanged."""
        other = "max" if self.sign == "min" else "min"
        return CostSpec(self.kind, sign=other, A=self.A, beta=self.beta, Q=self.Q,
                        func=self.func, expr=self.expr, label=self.label)

    def describe(self) -> str:
        if self.label:
            return self.label
        if self.kind == "contrast":
            return f"contrast{tuple(float(b) for b in self.beta)}"
        if self.kind == "custom_expr":
            return f"expr:{self.expr}"
        return self.kind

    def quadratic_matrix(self, K: int, d: int) -> NDArray[np.float64]:
        """The stacked-coordinate matrix ``Q`` (unsigned) for ``K`` margins in R^d."""
        eye = np.eye(d)
        if self.kind == "mw2":
            return np.kron(np.full((K, K), 1.0 / K**2), eye)
        if self.kind == "qmw":
            if self.A.shape != (K, K):
                raise SchemaError(f"A has shape {self.A.shape}, expected ({K}, {K})")
            return np.kron(self.A, eye)
        if self.kind == "contrast":
            if self.beta.shape[0] != K:
                raise SchemaError(f"beta has length {self.beta.shape[0]}, expected K={K}")
            return np.kron(np.outer(self.beta, self.beta), eye)
        if self.kind == "quadratic_general":
            if self.Q.shape != (K * d, K * d):
                raise SchemaError(f"Q has shape {self.Q.shape}, expected ({K * d}, {K * d})")
            return np.array(self.Q)
        raise SchemaError(f"cost kind {self.kind!r} is not quadratic")

    def validate_for(self, K: int, d: int) -> None:
        if self.is_quadratic:
            self.quadratic_matrix(K, d)
        elif self.kind == "custom_expr":
            self._parsed.check(K, d)

    # -- serialisation ------------------------------------------------------
    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"kind": self.kind, "sign": self.sign}
        if self.A is not None:
            out["A"] = self.A.tolist()
        if self.beta is not None:
            out["beta"] = self.beta.tolist()
        if self.Q is not None:
            out["Q"] = self.Q.tolist()
        if self.expr is not None:
            out["expr"] = self.expr
        if self.kind == "custom":
            out["func"] = getattr(self.func, "__name__", "callable")
        if self.label:
            out["label"] = self.label
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> CostSpec:
        if not isinstance(data, dict) or "kind" not in data:
            raise SchemaError("cost spec must be an object with a 'kind' field")
        kind = data["kind"]
        if kind == "custom":
            raise SchemaError("kind 'custom' needs a Python callable; use 'custom_expr' in JSON")
        unknown = set(data) - {"kind", "sign", "A", "beta", "Q", "expr", "label"}
        if unknown:
            raise SchemaError(f"unknown cost spec field(s) {sorted(unknown)}")
        return cls(kind, sign=data.get("sign", "min"), A=data.get("A"), beta=data.get("beta"),
                   Q=data.get("Q"), expr=data.get("expr"), label=data.get("label"))

    @classmethod
    def from_json(cls, text: str) -> CostSpec:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"cost spec is not valid JSON: {exc}") from None
        return cls.from_dict(data)


def eval_cell(spec: CostSpec, y: Sequence[ArrayLike]) -> float:
    """Objective value ``l(y(1), ..., y(K))`` at one cell (the sign is not applied)."""
    ys = [np.atleast_1d(np.asarray(v, dtype=float)) for v in y]
    if not ys:
        raise SchemaError("eval_cell needs at least one margin")
    d = ys[0].shape[0]
    if any(v.ndim != 1 or v.shape[0] != d for v in ys):
        raise SchemaError("all margins of a cell must be d-vectors of one dimension")
    K = len(ys)
    if spec.kind == "mw2":
        avg = sum(ys) / K
        return float(avg @ avg)
    if spec.kind == "qmw":
        if spec.A.shape != (K, K):
            raise SchemaError(f"A has shape {spec.A.shape}, expected ({K}, {K})")
        return float(sum(spec.A[i, j] * (ys[i] @ ys[j]) for i in range(K) for j in range(K)))
    if spec.kind == "contrast":
        if spec.beta.shape[0] != K:
            raise SchemaError(f"beta has length {spec.beta.shape[0]}, expected K={K}")
        s = sum(b * v for b, v in zip(spec.beta, ys))
        return float(s @ s)
    if spec.kind == "quadratic_general":
        z = np.concatenate(ys)
        if spec.Q.shape != (z.shape[0], z.shape[0]):
            raise SchemaError(f"Q has shape {spec.Q.shape}, expected ({z.shape[0]}, {z.shape[0]})")
        return float(z @ spec.Q @ z)
    if spec.kind == "custom":
        return float(spec.func(ys))
    spec._parsed.check(K, d)
    return float(spec._parsed(lambda k, j: ys[k][j]))


def pairwise_terms(spec: CostSpec, sys: MarginalSystem):
    """Split a quadratic cost into per-margin and per-pair arrays.

    Returns ``(unary, pairs)`` with ``unary[k][i] = y_k(i)^T Q_kk y_k(i)`` and
    ``pairs[(k, l)][i, j] = 2 y_k(i)^T Q_kl y_l(j)`` for ``k < l``, so that the
    cell value is the sum of the unary and pair terms it touches. Unsigned.
    """
    K, d = sys.K, sys.dim
    Q = spec.quadratic_matrix(K, d)
    ys = sys.points
    blk = lambda k, l: Q[k * d:(k + 1) * d, l * d:(l + 1) * d]
    unary = [np.einsum("ia,ab,ib->i", ys[k], blk(k, k), ys[k]) for k in range(K)]
    pairs = {(k, l): 2.0 * ys[k] @ blk(k, l) @ ys[l].T
             for k in range(K) for l in range(k + 1, K)}
    return unary, pairs


def _expand(a: NDArray, axes: Sequence[int], K: int) -> NDArray:
    shape = [1] * K
    for ax, n in zip(axes, a.shape):
        shape[ax] = n
    return a.reshape(shape)


def _dense_values(spec: CostSpec, sys: MarginalSystem) -> NDArray[np.float64]:
    K, shape = sys.K, sys.shape
    if spec.is_quadratic:
        unary, pairs = pairwise_terms(spec, sys)
        out = np.zeros(shape)
        for k, u in enumerate(unary):
            out += _expand(u, [k], K)
        for (k, l), c in pairs.items():
            out += _expand(c, [k, l], K)
        return out
    if spec.kind == "custom_expr":
        spec._parsed.check(K, sys.dim)
        pts = sys.points
        val = spec._parsed(lambda k, j: _expand(pts[k][:, j], [k], K))
        return np.broadcast_to(np.asarray(val, dtype=float), shape).copy()
    out = np.empty(shape)
    pts = sys.points
    for idx in np.ndindex(*shape):
        out[idx] = float(spec.func([pts[k][i] for k, i in enumerate(idx)]))
    return out


def _check_cap(shape: Sequence[int], cap: int) -> None:
    cells = int(np.prod([int(n) for n in shape], dtype=object))
    if cells > cap:
        raise CellCapError(cells, cap)


@dataclass(frozen=True)
class CostTensor:
    """Dense signed cost, shifted so that its smallest cell is zero.

    ``values = signed_cost + shift`` where ``signed_cost`` is the objective
    (negated for ``sign="max"``). ``sup_norm`` is ``max |signed_cost|``.
    """

    values: NDArray[np.float64]
    sup_norm: float
    shift: float
    sign: str = "min"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def K(self) -> int:
        return self.values.ndim

    @property
    def cells(self) -> int:
        return int(self.values.size)

    @property
    def max_value(self) -> float:
        return float(self.values.max())

    def preshift(self) -> NDArray[np.float64]:
        return self.values - self.shift

    def dense(self, cell_cap: int = DEFAULT_CELL_CAP) -> NDArray[np.float64]:
        return self.values

    @classmethod
    def from_array(cls, signed: ArrayLike, sign: str = "min") -> CostTensor:
        """Wrap an already signed cost array (used by tests and oracles)."""
        c = np.array(signed, dtype=float)
        if c.ndim < 2:
            raise ValueError("a cost tensor needs at least 2 axes")
        if not np.all(np.isfinite(c)):
            raise ValueError("cost values must be finite")
        shift = -float(c.min())
        vals = c + shift
        np.maximum(vals, 0.0, out=vals)
        vals.setflags(write=False)
        return cls(vals, float(np.max(np.abs(c))), shift, sign)


def build_cost_tensor(spec: CostSpec, sys: MarginalSystem,
                      cell_cap: int = DEFAULT_CELL_CAP) -> CostTensor:
    """Dense cost over all ``n_1 x ... x n_K`` cells of ``sys``."""
    _check_cap(sys.shape, cell_cap)
    spec.validate_for(sys.K, sys.dim)
    vals = _dense_values(spec, sys)
    if not np.all(np.isfinite(vals)):
        raise SchemaError("cost evaluated to non-finite values")
    if spec.sign == "max":
        vals = -vals
    return CostTensor.from_array(vals, spec.sign)


@dataclass(frozen=True)
class FactoredCost:
    """Quadratic cost kept as unary and pairwise pieces, never materialised.

    Same conventions as :class:`CostTensor`: the represented tensor is
    ``sum_k unary[k] + sum_{k<l} pairs[(k, l)]`` (already signed and shifted,
    the shift folded into ``unary[0]``).
    """

    unary: tuple[NDArray[np.float64], ...]
    pairs: dict[tuple[int, int], NDArray[np.float64]]
    sup_norm: float
    shift: float
    max_value: float
    sign: str = "min"

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(u.shape[0] for u in self.unary)

    @property
    def K(self) -> int:
        return len(self.unary)

    @property
    def cells(self) -> int:
        return int(np.prod(self.shape))

    def dense(self, cell_cap: int = DEFAULT_CELL_CAP) -> NDArray[np.float64]:
        _check_cap(self.shape, cell_cap)
        return _sum_terms(self.unary, self.pairs)


def _sum_terms(unary, pairs) -> NDArray[np.float64]:
    K = len(unary)
    out = np.zeros(tuple(u.shape[0] for u in unary))
    for k, u in enumerate(unary):
        out += _expand(u, [k], K)
    for (k, l), c in pairs.items():
        out += _expand(c, [k, l], K)
    return out


def _scan_extremes(unary, pairs, chunk_cells: int = 2_000_000) -> tuple[float, float]:
    """Min and max of the summed tensor, sliced along the first axis."""
    K = len(unary)
    rest = int(np.prod([u.shape[0] for u in unary[1:]]))
    step = max(1, chunk_cells // max(rest, 1))
    lo, hi = np.inf, -np.inf
    for start in range(0, unary[0].shape[0], step):
        sl = slice(start, start + step)
        block = _sum_terms([unary[0][sl]] + list(unary[1:]),
                           {kl: (c[sl] if kl[0] == 0 else c) for kl, c in pairs.items()})
        lo = min(lo, float(block.min()))
        hi = max(hi, float(block.max()))
    return lo, hi


def build_factored_cost(spec: CostSpec, sys: MarginalSystem) -> FactoredCost:
    """Factored counterpart of :func:`build_cost_tensor` for quadratic specs."""
    if not spec.is_quadratic:
        raise SchemaError(f"cost kind {spec.kind!r} has no pairwise factorisation")
    unary, pairs = pairwise_terms(spec, sys)
    if spec.sign == "max":
        unary = [-u for u in unary]
        pairs = {kl: -c for kl, c in pairs.items()}
    lo, hi = _scan_extremes(unary, pairs)
    shift = -lo
    unary = [unary[0] + shift] + list(unary[1:])
    for a in list(unary) + list(pairs.values()):
        a.setflags(write=False)
    return FactoredCost(tuple(unary), pairs, max(abs(lo), abs(hi)), shift, hi - lo, spec.sign)


def covariance_cross_spec(dims: tuple[int, int], arms: tuple[int, int] = (1, 0), *,
                          K: int = 2, d: int, beta: ArrayLike | None = None,
                          sign: str = "min") -> CostSpec:
    """Product of two treatment-effect coordinates as a ``quadratic_general`` spec.

    The cell value is ``tau^{j1} * tau^{j2}`` with
    ``tau^j = sum_k beta_k y^j(k)``; by default ``beta`` is the difference
    ``y(treated) - y(control)`` for the two arm indices in ``arms``. ``dims``
    are 0-based coordinates. The identifiable product of mean effects is not
    included here.
    """
    j1, j2 = (int(j) for j in dims)
    if d < 1 or not (0 <= j1 < d and 0 <= j2 < d):
        raise SchemaError(f"outcome coordinates {dims} out of range for d={d}")
    if beta is None:
        treated, control = (int(a) for a in arms)
        if not (0 <= treated < K and 0 <= control < K) or treated == control:
            raise SchemaError(f"arms {arms} invalid for K={K}")
        b = np.zeros(K)
        b[treated], b[control] = 1.0, -1.0
    else:
        b = np.array(beta, dtype=float).ravel()
        if b.shape[0] != K:
            raise SchemaError(f"beta has length {b.shape[0]}, expected K={K}")
    Q = np.zeros((K * d, K * d))
    for k in range(K):
        for l in range(K):
            w = 0.5 * b[k] * b[l]
            Q[k * d + j1, l * d + j2] += w
            Q[l * d + j2, k * d + j1] += w
    return CostSpec.quadratic(Q, sign=sign, label=f"cov(y{j1 + 1},y{j2 + 1})")


def resolve_spec(text: str, K: int | None = None) -> CostSpec:
    """Parse a CLI ``--spec`` value: a preset name, inline JSON or a JSON file path."""
    from pathlib import Path

    t = text.strip()
    if t in ("mw2",):
        return CostSpec.mw2()
    if t.startswith("{"):
        return CostSpec.from_json(t)
    p = Path(t)
    if p.exists():
        return CostSpec.from_json(p.read_text())
    raise SchemaError(f"--spec must be 'mw2', a JSON object or a JSON file, got {text!r}")
