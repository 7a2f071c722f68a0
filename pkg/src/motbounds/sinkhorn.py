"""Greedy multi-marginal Sinkhorn with rounding and dual certificates.

Each iteration picks the margin whose current marginal is furthest from its
target in KL divergence and rescales it exactly, working only with log-domain
potentials ``m``. Stopping uses the total marginal deviation (MTV) against
``eps' = eps / (8 ||C||_inf)``, after which the iterate is rounded onto the
coupling polytope.

Two additions make the reported numbers trustworthy at moderate ``eta``:

* Annealing. ``eta`` starts small and grows geometrically to its target,
  warm-starting each stage from the rescaled potentials. At the end of every
  stage the solver rounds a primal coupling and builds a certificate; if the
  certified gap is already within ``eps`` it stops there.
* Certificate repair. ``m / eta`` is turned into an exactly feasible dual
  point by c-transforms (``f_k = min over the other axes of C - sum f_l``),
  which can only raise the plain bound ``(1/eta) sum_k <m(k), mu(k)>``.

All reported values are for the *signed* objective: for ``sign="max"`` specs
they are values of the negated loss. :func:`motbounds.bounds.identified_interval`
turns them back into interval endpoints.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.typing import NDArray

from .cost import DEFAULT_CELL_CAP, CostTensor, FactoredCost
from .errors import NumericalError
from .kernels import (DenseCoupling, DenseKernel, FactoredCoupling, FactoredKernel, logsumexp,
                      round_dense)
from .measures import MarginalSystem

Array = NDArray[np.float64]
Coupling = DenseCoupling
LOG_FLOOR = 1e-300


@dataclass(frozen=True)
class SolverConfig:
    """Solver settings.

    Attributes:
        epsilon: target additive accuracy of the MOT value.
        eta_override: fixed regularisation strength; defaults to
            ``4 * sum_k log n_k / epsilon``.
        max_iters: cap on margin (Sinkhorn) or atom (Greenkhorn) updates.
        record_trace: keep one record per iteration.
        mtv_every: check the stopping rule every this many iterations.
        anneal_factor: growth of ``eta`` between stages; ``None`` runs a
            single stage at the target ``eta``.
        stage_tol: MTV tolerance of intermediate stages (never below eps').
        stall_tol: stop once a stage improves the certificate by less than
            this; ``None`` disables the rule.
        stage_stall_tol: end a stage early when an in-stage check improves
            the certificate by less than this; ``None`` disables the rule.
        polish_sweeps: rounds of c-transforms applied to build a certificate.
        gap_check_every: also round and certify inside a stage every this
            many iterations, stopping once the certified gap is within
            ``epsilon``; ``None`` checks only at stage ends.
        backend: ``"dense"``, ``"factored"`` or ``"auto"`` (used by callers
            that build the cost themselves, such as the bounds module).
        cell_cap: largest dense tensor the solver may materialise.
    """

    epsilon: float = 1e-3
    eta_override: float | None = None
    max_iters: int = 1_000_000
    record_trace: bool = False
    mtv_every: int = 1
    anneal_factor: float | None = 4.0
    stage_tol: float = 1e-3
    stall_tol: float | None = None
    stage_stall_tol: float | None = None
    polish_sweeps: int = 1
    gap_check_every: int | None = 200
    backend: str = "auto"
    cell_cap: int = DEFAULT_CELL_CAP

    def __post_init__(self):
        if not (self.epsilon > 0 and math.isfinite(self.epsilon)):
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.eta_override is not None and not self.eta_override > 0:
            raise ValueError("eta_override must be positive")
        if self.mtv_every < 1:
            raise ValueError("mtv_every must be at least 1")
        if self.anneal_factor is not None and not self.anneal_factor > 1:
            raise ValueError("anneal_factor must exceed 1")
        if self.backend not in ("auto", "dense", "factored"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.polish_sweeps < 1:
            raise ValueError("polish_sweeps must be at least 1")
        if self.gap_check_every is not None and self.gap_check_every < 1:
            raise ValueError("gap_check_every must be at least 1")

    def to_dict(self) -> dict:
        return {"epsilon": self.epsilon, "eta_override": self.eta_override,
                "max_iters": self.max_iters, "anneal_factor": self.anneal_factor,
                "stage_tol": self.stage_tol, "stall_tol": self.stall_tol,
                "stage_stall_tol": self.stage_stall_tol,
                "polish_sweeps": self.polish_sweeps, "gap_check_every": self.gap_check_every,
                "backend": self.backend}


@dataclass(frozen=True)
class Potentials:
    """Log-domain scalings ``m(k)``; the initial normaliser is folded into ``m(0)``."""

    m: tuple[Array, ...]

    def __post_init__(self):
        for v in self.m:
            if not np.all(np.isfinite(v)):
                raise NumericalError("potentials contain non-finite entries")


@dataclass(frozen=True)
class TraceRecord:
    iter: int
    margin_selected: int | dict
    mtv: float
    dual_bound: float
    eta: float

    def to_json(self) -> str:
        return json.dumps({"iter": self.iter, "margin_selected": self.margin_selected,
                           "mtv": self.mtv, "dual_bound": self.dual_bound, "eta": self.eta})


@dataclass(frozen=True)
class SolveResult:
    """Outcome of one solve.

    ``primal_value`` is the cost of the rounded (exactly feasible) coupling and
    ``dual_lower_bound`` a certified lower bound on the optimum; both are in
    the units of the unshifted signed cost. ``raw_dual_bound`` is the plain
    ``(1/eta) sum <m, mu>`` bound of the final potentials.
    """

    coupling: DenseCoupling | FactoredCoupling
    primal_value: float
    dual_lower_bound: float
    iterations: int
    converged: bool
    mtv_final: float
    trace: tuple[TraceRecord, ...] | None
    potentials: Potentials
    eta: float
    eta_target: float
    epsilon: float
    shift: float
    raw_dual_bound: float
    dual_potentials: tuple[Array, ...] = field(repr=False, default=())

    @property
    def gap(self) -> float:
        return self.primal_value - self.dual_lower_bound


# -- small public helpers ---------------------------------------------------

def _marginals_of(gamma) -> list[Array]:
    if isinstance(gamma, (DenseCoupling, FactoredCoupling)):
        return gamma.marginals()
    g = np.asarray(gamma, dtype=float)
    return [g.sum(axis=tuple(a for a in range(g.ndim) if a != k)) for k in range(g.ndim)]


def mtv(gamma, sys: MarginalSystem) -> float:
    """Total deviation ``sum_k sum_i |gamma(k)_i - mu(k)_i|`` of a tensor's marginals."""
    margs = _marginals_of(gamma)
    if tuple(len(g) for g in margs) != tuple(sys.shape):
        raise ValueError(f"tensor shape {tuple(len(g) for g in margs)} does not match {sys.shape}")
    return float(sum(np.abs(g - mu).sum() for g, mu in zip(margs, sys.weights)))


def round_to_feasible(gamma, sys: MarginalSystem) -> DenseCoupling:
    """Project a nonnegative tensor onto the couplings of ``sys``.

    Each margin is scaled down to at most its target in turn; the missing mass
    is then restored by a rank-1 term built from the per-margin deficits.
    """
    g = gamma.values if isinstance(gamma, DenseCoupling) else np.asarray(gamma, dtype=float)
    if tuple(g.shape) != tuple(sys.shape):
        raise ValueError(f"tensor shape {g.shape} does not match {sys.shape}")
    return DenseCoupling(round_dense(g, sys.weights))


def dual_lower_bound(m: Potentials | Sequence[Array], sys: MarginalSystem, eta: float,
                     shift: float = 0.0) -> float:
    """``(1/eta) sum_k <m(k), mu(k)> - shift``.

    A valid lower bound whenever ``sum_k m(k) <= eta * C`` cellwise, which
    holds after any exact margin update and at the normalised start.
    """
    ms = m.m if isinstance(m, Potentials) else m
    return float(sum(np.dot(v, w) for v, w in zip(ms, sys.weights)) / eta - shift)


def kl_terms(mus: Sequence[Array], log_gammas: Sequence[Array]) -> Array:
    """``KL(mu(k) || gamma(k))`` per margin with ``0 log 0 = 0`` and a floor on gamma."""
    out = np.empty(len(mus))
    for k, (mu, lg) in enumerate(zip(mus, log_gammas)):
        lg = np.maximum(lg, math.log(LOG_FLOOR))
        pos = mu > 0
        out[k] = float(np.sum(mu[pos] * (np.log(mu[pos]) - lg[pos])))
    return out


def default_eta(shape: Sequence[int], epsilon: float) -> float:
    total = sum(math.log(n) for n in shape)
    return 1.0 if total == 0 else 4.0 * total / epsilon


def make_kernel(cost, sys: MarginalSystem):
    if isinstance(cost, FactoredCost):
        return FactoredKernel(cost, sys)
    if isinstance(cost, CostTensor):
        return DenseKernel(cost, sys)
    raise TypeError(f"unsupported cost object {type(cost).__name__}")


# -- the annealing engine shared by both solvers ------------------------------

StageRunner = Callable[..., tuple[list[Array], int, float, str]]


class _Tracker:
    """Best certificate and best rounded coupling seen so far."""

    def __init__(self, kernel, cfg: SolverConfig):
        self.kernel, self.cfg = kernel, cfg
        self.cert, self.f = -math.inf, None
        self.primal, self.coupling = math.inf, None

    def checkpoint(self, m, eta) -> bool:
        """Certify and round ``m``; True once the certified gap is within epsilon."""
        cert, f = certificate(self.kernel, m, eta, self.cfg.polish_sweeps)
        if cert > self.cert:
            self.cert, self.f = cert, f
        coupling, primal = self.kernel.round(m, eta, self.cfg.cell_cap)
        if primal < self.primal:
            self.primal, self.coupling = primal, coupling
        return self.primal - self.cert <= self.cfg.epsilon


class _Stage:
    """Bookkeeping passed to a stage runner."""

    def __init__(self, kernel, eta, tol, budget, start_iter, trace, shift, cfg, tracker,
                 check_every):
        self.kernel, self.eta, self.tol, self.budget = kernel, eta, tol, budget
        self.start_iter, self.trace, self.shift, self.cfg = start_iter, trace, shift, cfg
        self.tracker, self.check_every = tracker, check_every
        self.log_mu = [np.log(mu) for mu in kernel.mus]

    def check(self, m, it: int) -> str | None:
        """In-stage checkpoint: ``"gap"`` once certified, ``"stall"`` once flat."""
        if self.check_every is None or it == 0 or it % self.check_every:
            return None
        before = self.tracker.cert
        if self.tracker.checkpoint(m, self.eta):
            return "gap"
        tol = self.cfg.stage_stall_tol
        if tol is not None and self.tracker.cert - before < tol:
            return "stall"
        return None

    def record(self, it: int, selected, mtv_value: float, m, log_mass: float):
        if self.trace is None:
            return
        raw = sum(np.dot(v, w) for v, w in zip(m, self.kernel.mus)) - max(0.0, log_mass)
        self.trace.append(TraceRecord(self.start_iter + it, selected, float(mtv_value),
                                      float(raw / self.eta - self.shift), float(self.eta)))


def _check_finite(arrays, it, margin=None):
    for k, a in enumerate(arrays):
        if not np.all(np.isfinite(a)):
            raise NumericalError("non-finite marginal or potential",
                                 iteration=it, margin=k if margin is None else margin)


def _normalise(kernel, m, eta):
    g = kernel.log_marginals(m, eta)
    _check_finite(g, 0)
    m = [np.array(v) for v in m]
    m[0] -= logsumexp(g[0])
    return m


def certificate(kernel, m: Sequence[Array], eta: float, sweeps: int) -> tuple[float, list[Array]]:
    """Feasible dual value obtained from ``m / eta`` by c-transform sweeps."""
    f = [np.asarray(v, dtype=float) / eta for v in m]
    for _ in range(sweeps):
        for k in range(kernel.K):
            f[k] = kernel.c_transform(f, k)
    return float(sum(np.dot(a, w) for a, w in zip(f, kernel.mus))), f


def anneal(cost, sys: MarginalSystem, cfg: SolverConfig, runner: StageRunner,
           check_every: int | None = None) -> SolveResult:
    kernel = make_kernel(cost, sys)
    eps = cfg.epsilon
    eta_target = cfg.eta_override if cfg.eta_override is not None else default_eta(sys.shape, eps)
    eps_prime = eps / (8.0 * cost.sup_norm) if cost.sup_norm > 0 else math.inf
    if check_every is None:
        check_every = cfg.gap_check_every

    etas = [eta_target]
    if cfg.anneal_factor is not None and cost.max_value > 0:
        eta = min(eta_target, 10.0 / cost.max_value)
        etas = []
        while eta < eta_target:
            etas.append(eta)
            eta *= cfg.anneal_factor
        etas.append(eta_target)

    trace: list[TraceRecord] | None = [] if cfg.record_trace else None
    best = _Tracker(kernel, cfg)
    m = _normalise(kernel, [np.zeros(n) for n in sys.shape], etas[0])
    it_total = 0
    converged = False
    mtv_value = math.inf
    prev_eta = etas[0]
    prev_cert = -math.inf

    for stage, eta in enumerate(etas):
        if stage > 0:
            m = _normalise(kernel, [v * (eta / prev_eta) for v in m], eta)
        prev_eta = eta
        final = stage == len(etas) - 1
        tol = eps_prime if final else max(eps_prime, cfg.stage_tol)
        ctx = _Stage(kernel, eta, tol, cfg.max_iters - it_total, it_total, trace, cost.shift,
                     cfg, best, check_every)
        m, n_it, mtv_value, status = runner(ctx, m)
        it_total += n_it
        _check_finite(m, it_total)
        if status == "gap":
            converged = True
            break
        if best.checkpoint(m, eta) or (final and status == "mtv"):
            converged = True
            break
        if it_total >= cfg.max_iters:
            break
        if cfg.stall_tol is not None and stage > 0 and best.cert - prev_cert < cfg.stall_tol:
            break
        prev_cert = best.cert

    shift = cost.shift
    return SolveResult(
        coupling=best.coupling,
        primal_value=best.primal - shift,
        dual_lower_bound=best.cert - shift,
        iterations=it_total,
        converged=converged,
        mtv_final=float(mtv_value),
        trace=tuple(trace) if trace is not None else None,
        potentials=Potentials(tuple(m)),
        eta=float(prev_eta),
        eta_target=float(eta_target),
        epsilon=eps,
        shift=shift,
        raw_dual_bound=dual_lower_bound(m, sys, prev_eta, shift),
        dual_potentials=tuple(best.f),
    )


def _sinkhorn_stage(ctx: _Stage, m: list[Array]):
    kernel, eta = ctx.kernel, ctx.eta
    mus = kernel.mus
    it = 0
    mtv_value = math.inf
    while True:
        g = kernel.log_marginals(m, eta)
        _check_finite(g, ctx.start_iter + it)
        if it % ctx.cfg.mtv_every == 0 or it >= ctx.budget:
            mtv_value = float(sum(np.abs(np.exp(gk) - mu).sum() for gk, mu in zip(g, mus)))
            if mtv_value <= ctx.tol:
                return m, it, mtv_value, "mtv"
        if it >= ctx.budget:
            return m, it, mtv_value, "budget"
        status = ctx.check(m, it)
        if status:
            return m, it, mtv_value, status
        kl = kl_terms(mus, g)
        k = int(np.argmax(kl))
        m[k] = m[k] + ctx.log_mu[k] - np.maximum(g[k], math.log(LOG_FLOOR))
        it += 1
        if ctx.trace is not None:
            # the updated margin now carries mass exactly 1
            ctx.record(it, k, mtv_value, m, 0.0)


def solve(cost: CostTensor | FactoredCost, sys: MarginalSystem,
          cfg: SolverConfig | None = None) -> SolveResult:
    """Greedy multi-marginal Sinkhorn on ``cost`` with the marginals of ``sys``.

    Raises:
        ValueError: the cost shape does not match the marginal support sizes.
        NumericalError: a marginal or potential became non-finite.
    """
    return anneal(cost, sys, cfg or SolverConfig(), _sinkhorn_stage)
