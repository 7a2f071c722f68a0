"""Partial identification: interval endpoints, baselines and Neyman intervals.

Every endpoint reported here is a *certified* bound: the lower endpoint is
the dual certificate of the minimisation and the upper endpoint is the
negated certificate of the flipped problem. Rounded primal values are kept
alongside so the remaining gap is visible.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Any, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from . import greenkhorn, sinkhorn
from .cost import (CostSpec, build_cost_tensor, build_factored_cost,
                   covariance_cross_spec)
from .errors import SchemaError
from .measures import MarginalSystem, empirical_from_samples
from .sinkhorn import SolveResult, SolverConfig

FACTORED_MIN_CELLS = 200_000
ALGORITHMS = ("sinkhorn", "greenkhorn")


@dataclass(frozen=True)
class Certificate:
    """How one endpoint was obtained."""

    dual_bound: float
    primal_value: float
    converged: bool
    iterations: int
    eta: float
    mtv_final: float

    @property
    def gap(self) -> float:
        return self.primal_value - self.dual_bound

    @classmethod
    def from_result(cls, r: SolveResult, negate: bool = False) -> Certificate:
        s = -1.0 if negate else 1.0
        return cls(s * r.dual_lower_bound, s * r.primal_value, r.converged, r.iterations,
                   r.eta, r.mtv_final)


@dataclass(frozen=True)
class IdentifiedInterval:
    """``[lower, upper]`` for the signed objective of ``estimand_label``.

    For the upper endpoint ``dual_bound`` holds the certified value (an upper
    bound) and ``primal_value`` the value of a feasible coupling below it.
    """

    lower: float
    upper: float
    lower_certificate: Certificate
    upper_certificate: Certificate
    estimand_label: str
    epsilon: float
    baseline: float | None = None
    config: dict = field(default_factory=dict)
    traces: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def converged(self) -> bool:
        return self.lower_certificate.converged and self.upper_certificate.converged

    def shifted(self, offset: float) -> IdentifiedInterval:
        """Interval for ``objective - offset``."""
        lc, uc = self.lower_certificate, self.upper_certificate
        lc = Certificate(lc.dual_bound - offset, lc.primal_value - offset, lc.converged,
                         lc.iterations, lc.eta, lc.mtv_final)
        uc = Certificate(uc.dual_bound - offset, uc.primal_value - offset, uc.converged,
                         uc.iterations, uc.eta, uc.mtv_final)
        return IdentifiedInterval(self.lower - offset, self.upper - offset, lc, uc,
                                  self.estimand_label, self.epsilon, self.baseline, self.config,
                                  self.traces)

    def to_dict(self) -> dict[str, Any]:
        lc, uc = self.lower_certificate, self.upper_certificate
        return {
            "estimand": self.estimand_label,
            "lower": self.lower,
            "upper": self.upper,
            "lower_converged": lc.converged,
            "upper_converged": uc.converged,
            "dual_gap_lower": lc.gap,
            "dual_gap_upper": -uc.gap,
            "lower_primal": lc.primal_value,
            "upper_primal": uc.primal_value,
            "baseline": self.baseline,
            "config": {**self.config, "epsilon": self.epsilon,
                       "eta_lower": lc.eta, "eta_upper": uc.eta,
                       "iterations_lower": lc.iterations, "iterations_upper": uc.iterations},
        }


def build_cost(spec: CostSpec, sys: MarginalSystem, cfg: SolverConfig,
               algorithm: str = "sinkhorn"):
    """Dense tensor or factored cost, following ``cfg.backend``."""
    backend = cfg.backend
    if backend == "auto":
        big = int(np.prod(sys.shape)) > FACTORED_MIN_CELLS
        backend = ("factored" if big and spec.is_quadratic and sys.K == 3
                   and algorithm == "sinkhorn" else "dense")
    if backend == "factored":
        if algorithm != "sinkhorn":
            raise SchemaError("the factored backend is only available for Sinkhorn")
        if sys.K != 3:
            raise SchemaError("the factored backend needs exactly three arms")
        return build_factored_cost(spec, sys)
    return build_cost_tensor(spec, sys, cell_cap=cfg.cell_cap)


def solve_spec(spec: CostSpec, sys: MarginalSystem, cfg: SolverConfig | None = None,
               algorithm: str = "sinkhorn") -> SolveResult:
    """Build the cost of ``spec`` and minimise its signed objective."""
    if algorithm not in ALGORITHMS:
        raise SchemaError(f"unknown algorithm {algorithm!r}; expected one of {ALGORITHMS}")
    cfg = cfg or SolverConfig()
    spec.validate_for(sys.K, sys.dim)
    cost = build_cost(spec, sys, cfg, algorithm)
    module = sinkhorn if algorithm == "sinkhorn" else greenkhorn
    return module.solve(cost, sys, cfg)


def identified_interval(spec: CostSpec, sys: MarginalSystem, cfg: SolverConfig | None = None,
                        algorithm: str = "sinkhorn") -> IdentifiedInterval:
    """Certified ``[inf, sup]`` of the signed objective over all couplings of ``sys``."""
    cfg = cfg or SolverConfig()
    low = solve_spec(spec, sys, cfg, algorithm)
    high = solve_spec(spec.flipped(), sys, cfg, algorithm)
    baseline = None
    if spec.kind in ("mw2", "qmw", "contrast"):
        b = baseline_lower_bound(spec, sys)
        baseline = b if spec.sign == "min" else -b
    return IdentifiedInterval(
        lower=low.dual_lower_bound,
        upper=-high.dual_lower_bound,
        lower_certificate=Certificate.from_result(low),
        upper_certificate=Certificate.from_result(high, negate=True),
        estimand_label=spec.describe(),
        epsilon=cfg.epsilon,
        baseline=baseline,
        config={**cfg.to_dict(), "algorithm": algorithm, "eta_target": low.eta_target},
        traces={"lower": low.trace, "upper": high.trace} if cfg.record_trace else {},
    )


def baseline_lower_bound(spec: CostSpec, sys: MarginalSystem) -> float:
    """Mean-only part of a quadratic objective, evaluated at the arm means.

    For ``mw2`` this is ``||sum_k mean_k / K||^2``, for ``qmw`` it is
    ``sum a_kl <mean_k, mean_l>`` and for ``contrast`` ``||sum beta_k mean_k||^2``.
    The sign of ``spec`` is ignored.
    """
    if spec.kind not in ("mw2", "qmw", "contrast"):
        raise SchemaError(f"no mean-only baseline for cost kind {spec.kind!r}")
    Q = spec.quadratic_matrix(sys.K, sys.dim)
    z = sys.means().ravel()
    return float(z @ Q @ z)


@dataclass(frozen=True)
class NeymanResult:
    """Design-based variance of a contrast estimator, with and without the MOT bound."""

    tau_hat: float
    s_k_sq: tuple[float, ...]
    s_tau_sq_lower: float
    v_conventional: float
    v_sharp: float
    ci_conventional: tuple[float, float]
    ci_sharp: tuple[float, float]
    n_k: tuple[int, ...]
    alpha: float
    mot_lower: float
    converged: bool

    @property
    def reduction(self) -> float:
        """Relative decrease of the variance, ``1 - v_sharp / v_conventional``."""
        return 0.0 if self.v_conventional == 0 else 1.0 - self.v_sharp / self.v_conventional

    def to_dict(self) -> dict[str, Any]:
        return {"tau_hat": self.tau_hat, "s_k_sq": list(self.s_k_sq),
                "s_tau_sq_lower": self.s_tau_sq_lower, "v_conventional": self.v_conventional,
                "v_sharp": self.v_sharp, "ci_conventional": list(self.ci_conventional),
                "ci_sharp": list(self.ci_sharp), "n_k": list(self.n_k), "alpha": self.alpha,
                "mot_lower": self.mot_lower, "converged": self.converged,
                "reduction": self.reduction}


def _ci(center: float, v: float, z: float) -> tuple[float, float]:
    half = z * math.sqrt(max(v, 0.0))
    return (center - half, center + half)


def neyman_ci(arms: Sequence[ArrayLike], beta: ArrayLike, cfg: SolverConfig | None = None,
              alpha: float = 0.05, algorithm: str = "sinkhorn") -> NeymanResult:
    """Neyman variance of ``sum_k beta_k * mean_k`` with a sharpened ``S_tau^2`` term.

    ``S_tau^2`` is the finite-population variance of the unit-level contrast.
    It is not identified; its sharp lower bound is
    ``n/(n-1) * (min_gamma E_gamma[(sum_k beta_k Y(k))^2] - tau_hat^2)``,
    floored at zero, with the arms' empirical distributions as marginals.

    Raises:
        SchemaError: an arm has fewer than 2 samples, outcomes are not
            scalar, or ``beta`` has the wrong length.
    """
    cfg = cfg or SolverConfig()
    samples = [np.asarray(a, dtype=float) for a in arms]
    for k, a in enumerate(samples):
        if a.ndim == 2 and a.shape[1] == 1:
            samples[k] = a[:, 0]
        elif a.ndim != 1:
            raise SchemaError("Neyman intervals need scalar outcomes")
        if samples[k].shape[0] < 2:
            raise SchemaError(f"arm {k} has {samples[k].shape[0]} sample(s); need at least 2")
    b = np.asarray(beta, dtype=float).ravel()
    if b.shape[0] != len(samples):
        raise SchemaError(f"beta has length {b.shape[0]} for {len(samples)} arms")
    if abs(b.sum()) > 1e-12:
        warnings.warn(f"contrast coefficients sum to {b.sum():g}, not 0", stacklevel=2)
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")

    n_k = [a.shape[0] for a in samples]
    n = sum(n_k)
    means = np.array([a.mean() for a in samples])
    s_sq = np.array([a.var(ddof=1) for a in samples])
    tau = float(b @ means)
    v_conv = float(np.sum(b**2 * s_sq / np.array(n_k)))

    sys = MarginalSystem(tuple(empirical_from_samples(a) for a in samples))
    res = solve_spec(CostSpec.contrast(b), sys, cfg, algorithm)
    s_lower = max(0.0, n / (n - 1) * (res.dual_lower_bound - tau**2))
    v_sharp = v_conv - s_lower / n
    z = NormalDist().inv_cdf(1 - alpha / 2)
    return NeymanResult(tau, tuple(float(x) for x in s_sq), s_lower, v_conv, v_sharp,
                        _ci(tau, v_conv, z), _ci(tau, v_sharp, z), tuple(n_k), alpha,
                        res.dual_lower_bound, res.converged)


def _arm_index(sys: MarginalSystem, arm: int | str) -> int:
    if isinstance(arm, str):
        return sys.index(arm)
    if not 0 <= int(arm) < sys.K:
        raise SchemaError(f"arm index {arm} out of range for {sys.K} arms")
    return int(arm)


def covariance_bounds(sys: MarginalSystem, dims: tuple[int, int],
                      arms: tuple[int | str, int | str] = (1, 0),
                      cfg: SolverConfig | None = None, beta: ArrayLike | None = None,
                      algorithm: str = "sinkhorn") -> IdentifiedInterval:
    """Bounds on ``Cov(tau^{j1}, tau^{j2})`` for two outcome coordinates (0-based).

    By default ``tau = Y(treated) - Y(control)`` and only those two arms enter
    the problem. Passing ``beta`` uses the contrast ``sum_k beta_k Y(k)`` over
    all arms instead. The identified product of mean effects is subtracted
    from both endpoints.
    """
    cfg = cfg or SolverConfig()
    j1, j2 = (int(j) for j in dims)
    if not (0 <= j1 < sys.dim and 0 <= j2 < sys.dim):
        raise SchemaError(f"outcome coordinates {dims} out of range for d={sys.dim}")
    if beta is None:
        t, c = _arm_index(sys, arms[0]), _arm_index(sys, arms[1])
        if t == c:
            raise SchemaError("treated and control arms must differ")
        sub = MarginalSystem((sys.marginals[c], sys.marginals[t]),
                             (sys.labels[c], sys.labels[t]))
        b = np.array([-1.0, 1.0])
    else:
        sub = sys
        b = np.asarray(beta, dtype=float).ravel()
    spec = covariance_cross_spec((j1, j2), K=sub.K, d=sub.dim, beta=b)
    interval = identified_interval(spec, sub, cfg, algorithm)
    mean_effect = b @ sub.means()
    return interval.shifted(float(mean_effect[j1] * mean_effect[j2]))


def covariance_sweep(sys: MarginalSystem, arms=(1, 0), cfg: SolverConfig | None = None,
                     beta: ArrayLike | None = None, algorithm: str = "sinkhorn"):
    """Covariance bounds for every pair ``j1 < j2`` of outcome coordinates."""
    rows = []
    for j1 in range(sys.dim):
        for j2 in range(j1 + 1, sys.dim):
            iv = covariance_bounds(sys, (j1, j2), arms, cfg, beta, algorithm)
            rows.append(((j1, j2), iv))
    return rows
