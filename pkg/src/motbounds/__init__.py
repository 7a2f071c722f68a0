"""Sharp bounds on non-identified causal estimands via multi-marginal optimal transport."""

from .bounds import (IdentifiedInterval, NeymanResult, baseline_lower_bound, covariance_bounds,
                     identified_interval, neyman_ci)
from .cost import (CostSpec, CostTensor, FactoredCost, build_cost_tensor, build_factored_cost,
                   covariance_cross_spec, eval_cell)
from .errors import CellCapError, MotError, NumericalError, SchemaError
from .measures import (DiscreteMarginal, MarginalSystem, center, empirical_from_samples,
                       load_marginals, rescale_to_unit_ball)
from .oracle import LpSolution, gaussian_mw2, lp_exact, permutation_min
from .sinkhorn import (Coupling, Potentials, SolveResult, SolverConfig, dual_lower_bound, mtv,
                       round_to_feasible)

__all__ = [
    "CellCapError", "CostSpec", "CostTensor", "Coupling", "DiscreteMarginal", "FactoredCost",
    "IdentifiedInterval", "LpSolution", "MarginalSystem", "MotError", "NeymanResult",
    "NumericalError", "Potentials", "SchemaError", "SolveResult", "SolverConfig",
    "baseline_lower_bound", "build_cost_tensor", "build_factored_cost", "center",
    "covariance_bounds", "covariance_cross_spec", "dual_lower_bound", "empirical_from_samples",
    "eval_cell", "gaussian_mw2", "identified_interval", "load_marginals", "lp_exact", "mtv",
    "neyman_ci", "permutation_min", "rescale_to_unit_ball", "round_to_feasible",
]
