"""Synthetic Gaussian experiments with known answers.

Random draws come from ``numpy.random.default_rng(seed)`` (the PCG64 bit
generator), consumed margin by margin in order, so results are reproducible
across platforms for a given seed.
"""

from __future__ import annotations

from dataclasses import replace
from typing import Sequence

import numpy as np

from .bounds import solve_spec
from .cost import CostSpec
from .measures import MarginalSystem, empirical_from_samples
from .oracle import gaussian_mw2
from .sinkhorn import SolverConfig

DEFAULT_SEED = 0
GAUSSIAN_SIGMAS = (2.0, 0.3, 0.1)
GAUSSIAN2D_VARIANCES = (2.0, 2.0, 0.3, 0.3, 0.1, 0.1)
GAUSSIAN2D_BETA = (1.0, -0.5, -0.5)


def experiment_config(epsilon: float = 1e-3, **overrides) -> SolverConfig:
    """Solver settings used by the experiments: stop once the certificate stalls.

    A stage ends early once 200 iterations add less than ``epsilon / 10`` to
    the certificate, and the run ends once a whole stage adds less than
    ``epsilon``.
    """
    cfg = SolverConfig(epsilon=epsilon, stall_tol=epsilon, stage_stall_tol=epsilon / 10)
    return replace(cfg, **overrides) if overrides else cfg


def gaussian_system(sigmas: Sequence[float], n: int, seed: int = DEFAULT_SEED) -> MarginalSystem:
    """``n`` centred normal draws per margin with standard deviations ``sigmas``."""
    if n < 1:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    return MarginalSystem(tuple(empirical_from_samples(rng.normal(0.0, s, n)) for s in sigmas))


def synth_gaussian(sigmas: Sequence[float] = GAUSSIAN_SIGMAS, n: int = 200,
                   seed: int = DEFAULT_SEED, cfg: SolverConfig | None = None,
                   algorithm: str = "sinkhorn") -> dict:
    """Empirical MW2^2 lower bound against the Gaussian closed form."""
    closed = gaussian_mw2(sigmas)
    cfg = cfg or experiment_config()
    sys = gaussian_system(sigmas, n, seed)
    res = solve_spec(CostSpec.mw2(), sys, cfg, algorithm)
    return {
        "sigmas": [float(s) for s in sigmas], "n": n, "seed": seed,
        "empirical_lower": res.dual_lower_bound, "empirical_primal": res.primal_value,
        "closed_form": closed, "gap": res.dual_lower_bound - closed,
        "converged": res.converged, "iterations": res.iterations, "eta": res.eta,
        "epsilon": cfg.epsilon,
    }


def gaussian2d_expectation(variances: Sequence[float] = GAUSSIAN2D_VARIANCES,
                           beta: Sequence[float] = GAUSSIAN2D_BETA, d: int = 2) -> float:
    """``E ||sum_k beta_k Y(k)||^2`` under ``N(0, diag(variances))`` of the stacked outcomes."""
    M = np.kron(np.asarray(beta, dtype=float)[None, :], np.eye(d))
    return float(np.trace(M @ np.diag(variances) @ M.T))


def gaussian2d_system(n: int = 100, seed: int = DEFAULT_SEED,
                      variances: Sequence[float] = GAUSSIAN2D_VARIANCES, d: int = 2
                      ) -> MarginalSystem:
    """``n`` joint draws of the stacked outcome vector, split into ``d``-dimensional arms."""
    var = np.asarray(variances, dtype=float)
    if var.shape[0] % d or np.any(var < 0):
        raise ValueError("variances must be nonnegative and a multiple of d long")
    rng = np.random.default_rng(seed)
    joint = rng.normal(size=(n, var.shape[0])) * np.sqrt(var)
    K = var.shape[0] // d
    return MarginalSystem(tuple(empirical_from_samples(joint[:, k * d:(k + 1) * d])
                                for k in range(K)))


def synth_gaussian2d(n: int = 100, seed: int = DEFAULT_SEED,
                     variances: Sequence[float] = GAUSSIAN2D_VARIANCES,
                     beta: Sequence[float] = GAUSSIAN2D_BETA,
                     cfg: SolverConfig | None = None, algorithm: str = "sinkhorn") -> dict:
    """Contrast lower bound from the arm marginals against the generating joint."""
    cfg = cfg or experiment_config()
    sys = gaussian2d_system(n, seed, variances)
    res = solve_spec(CostSpec.contrast(beta), sys, cfg, algorithm)
    analytic = gaussian2d_expectation(variances, beta, sys.dim)
    return {
        "n": n, "seed": seed, "variances": [float(v) for v in variances],
        "beta": [float(b) for b in beta],
        "empirical_lower": res.dual_lower_bound, "empirical_primal": res.primal_value,
        "analytic_expectation": analytic, "converged": res.converged,
        "iterations": res.iterations, "eta": res.eta, "epsilon": cfg.epsilon,
    }


def rate_sweep(ns: Sequence[int] = (100, 400, 1600), seeds: Sequence[int] = range(20),
               sigmas: Sequence[float] = GAUSSIAN_SIGMAS, cfg: SolverConfig | None = None
               ) -> dict:
    """Median ``|empirical - closed form|`` per total sample size.

    Each ``n`` counts samples across all arms, split evenly, so every arm
    receives ``n // K`` draws.
    """
    K = len(sigmas)
    closed = gaussian_mw2(sigmas)
    out = {}
    for n in ns:
        per_arm = n // K
        errs = [abs(synth_gaussian(sigmas, per_arm, seed, cfg)["empirical_lower"] - closed)
                for seed in seeds]
        out[int(n)] = {"per_arm": per_arm, "median_abs_error": float(np.median(errs)),
                       "errors": [float(e) for e in errs]}
    return out
