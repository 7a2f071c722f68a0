"""Empirical marginal distributions for the treatment arms.

Each arm of an experiment contributes one :class:`DiscreteMarginal`, a weighted
finite support in R^d. A :class:`MarginalSystem` bundles the K arms that a
coupling has to respect.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import SchemaError

WEIGHT_SUM_TOL = 1e-12
MIN_WEIGHT = 1e-15

_OUTCOME_COLUMN = re.compile(r"^y(\d+)$")


def _frozen(a: NDArray) -> NDArray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class DiscreteMarginal:
    """Weighted atoms ``points[i]`` with probabilities ``weights[i]``.

    ``points`` is stored as an ``(n, d)`` array; a 1-D input is read as
    ``n`` scalar atoms.
    """

    points: NDArray[np.float64]
    weights: NDArray[np.float64]

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] < 1:
            raise ValueError("points must be a non-empty (n, d) array")
        w = np.asarray(self.weights, dtype=float).ravel()
        if w.shape[0] != pts.shape[0]:
            raise ValueError(f"{w.shape[0]} weights for {pts.shape[0]} points")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        if not np.all(np.isfinite(w)) or np.min(w) < MIN_WEIGHT:
            raise ValueError(f"weights must be finite and at least {MIN_WEIGHT}")
        if abs(w.sum() - 1.0) > WEIGHT_SUM_TOL:
            raise ValueError(f"weights sum to {w.sum()!r}, expected 1")
        object.__setattr__(self, "points", _frozen(pts))
        object.__setattr__(self, "weights", _frozen(w))

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def mean(self) -> NDArray[np.float64]:
        return self.weights @ self.points

    def translate(self, offset: ArrayLike) -> DiscreteMarginal:
        return DiscreteMarginal(self.points + np.asarray(offset, dtype=float), self.weights)


@dataclass(frozen=True)
class MarginalSystem:
    """The K marginals a coupling must match, all in the same dimension."""

    marginals: tuple[DiscreteMarginal, ...]
    labels: tuple[str, ...] = field(default=())

    def __post_init__(self):
        margs = tuple(self.marginals)
        if len(margs) < 2:
            raise ValueError("a marginal system needs at least 2 marginals")
        dims = {m.dim for m in margs}
        if len(dims) != 1:
            raise ValueError(f"marginals have mixed dimensions {sorted(dims)}")
        labels = tuple(self.labels) or tuple(str(k) for k in range(len(margs)))
        if len(labels) != len(margs):
            raise ValueError("one label per marginal is required")
        object.__setattr__(self, "marginals", margs)
        object.__setattr__(self, "labels", labels)

    @property
    def K(self) -> int:
        return len(self.marginals)

    @property
    def dim(self) -> int:
        return self.marginals[0].dim

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(m.n for m in self.marginals)

    @property
    def weights(self) -> list[NDArray[np.float64]]:
        return [m.weights for m in self.marginals]

    @property
    def points(self) -> list[NDArray[np.float64]]:
        return [m.points for m in self.marginals]

    def means(self) -> NDArray[np.float64]:
        """``(K, d)`` array of per-arm means."""
        return np.stack([m.mean() for m in self.marginals])

    def select(self, labels: Sequence[str]) -> MarginalSystem:
        idx = [self.index(lab) for lab in labels]
        return MarginalSystem(tuple(self.marginals[i] for i in idx), tuple(labels))

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise SchemaError(f"unknown arm label {label!r}; have {list(self.labels)}") from None


def empirical_from_samples(samples: ArrayLike) -> DiscreteMarginal:
    """Uniform distribution over the given samples.

    Duplicates stay separate atoms so the support size equals the sample count.
    """
    try:
        pts = np.array(samples, dtype=float)
    except ValueError as exc:  # ragged nested lists
        raise ValueError(f"samples have ragged dimensions: {exc}") from None
    if pts.size == 0 or pts.shape[0] == 0:
        raise ValueError("empirical_from_samples needs at least one sample")
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.ndim != 2:
        raise ValueError(f"samples must be a list of d-vectors, got shape {pts.shape}")
    n = pts.shape[0]
    return DiscreteMarginal(pts, np.full(n, 1.0 / n))


def center(m: DiscreteMarginal) -> tuple[DiscreteMarginal, NDArray[np.float64]]:
    """Translate ``m`` to weighted mean zero; returns the shifted marginal and the mean."""
    mu = m.mean()
    centered = m.points - mu
    # second pass removes the O(eps * |mean|) residual left by the first
    centered = centered - m.weights @ centered
    return DiscreteMarginal(centered, m.weights), mu


def rescale_to_unit_ball(sys: MarginalSystem) -> tuple[MarginalSystem, float, NDArray[np.float64]]:
    """Affine map ``y -> (y - offset) / scale`` placing every atom in the unit ball.

    The offset is the midpoint of the coordinate-wise bounding box over all arms.
    Returns the mapped system together with ``scale`` and ``offset`` so callers
    can translate results back.
    """
    allpts = np.vstack(sys.points)
    offset = 0.5 * (allpts.max(axis=0) + allpts.min(axis=0))
    scale = float(np.max(np.linalg.norm(allpts - offset, axis=1)))
    if scale == 0.0:
        scale = 1.0
    margs = tuple(
        DiscreteMarginal((m.points - offset) / scale, m.weights) for m in sys.marginals
    )
    return MarginalSystem(margs, sys.labels), scale, offset


def _outcome_columns(header: Sequence[str]) -> list[str]:
    cols = []
    for name in header:
        match = _OUTCOME_COLUMN.match(name.strip())
        if match:
            cols.append((int(match.group(1)), name))
    cols.sort()
    if not cols:
        raise SchemaError("no outcome columns: expected y1..yd")
    if [j for j, _ in cols] != list(range(1, len(cols) + 1)):
        raise SchemaError(f"outcome columns must be y1..yd without gaps, got {[c for _, c in cols]}")
    return [c for _, c in cols]


def load_marginals(path: str | Path, arms: Sequence[str] | None = None) -> MarginalSystem:
    """Read arm-labelled outcomes from CSV into a :class:`MarginalSystem`.

    Expected columns: ``arm``, ``y1`` .. ``yd`` and optionally ``unit``
    (ignored). Arms are ordered as in ``arms`` when given, otherwise
    lexicographically. Each arm becomes a uniform empirical marginal.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        if "arm" not in header:
            raise SchemaError(f"{path}: missing 'arm' column")
        ycols = _outcome_columns(header)
        arm_idx = header.index("arm")
        y_idx = [header.index(c) for c in ycols]

        groups: dict[str, list[list[float]]] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < len(header):
                raise SchemaError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            label = row[arm_idx].strip()
            if not label:
                raise SchemaError(f"{path}:{lineno}: empty arm label")
            vals = []
            for j in y_idx:
                cell = row[j].strip()
                if not cell:
                    raise SchemaError(f"{path}:{lineno}: missing value for {header[j]}")
                try:
                    v = float(cell)
                except ValueError:
                    raise SchemaError(f"{path}:{lineno}: non-numeric outcome {cell!r}") from None
                if not np.isfinite(v):
                    raise SchemaError(f"{path}:{lineno}: non-finite outcome {cell!r}")
                vals.append(v)
            groups.setdefault(label, []).append(vals)

    if arms is None:
        order = sorted(groups)
    else:
        order = [a.strip() for a in arms]
        unknown = sorted(set(groups) - set(order))
        if unknown:
            raise SchemaError(f"{path}: unknown arm label(s) {unknown}; declared {order}")
        missing = [a for a in order if a not in groups]
        if missing:
            raise SchemaError(f"{path}: declared arm(s) {missing} have no rows")
    if len(order) < 2:
        raise SchemaError(f"{path}: need at least 2 arms, found {len(order)}")
    margs = tuple(empirical_from_samples(groups[a]) for a in order)
    return MarginalSystem(margs, tuple(order))
