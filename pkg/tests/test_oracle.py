import itertools

import numpy as np
import pytest

from conftest import random_spec, random_system
from motbounds.cost import CostSpec, CostTensor, build_cost_tensor
from motbounds.errors import CellCapError
from motbounds.measures import DiscreteMarginal, MarginalSystem, empirical_from_samples
from motbounds.oracle import (_simplex, gaussian_mw2, lp_exact, marginal_constraints,
                              permutation_min, product_coupling_value)
from motbounds.sinkhorn import mtv


def point_masses(*values):
    return MarginalSystem(tuple(empirical_from_samples([[v]]) for v in values))


def uniform01():
    m = empirical_from_samples([[0.0], [1.0]])
    return MarginalSystem((m, m))


class TestLpExact:
    def test_point_masses_force_single_cell(self):
        sys = point_masses(0.3, -1.2, 2.0)
        sol = lp_exact(build_cost_tensor(CostSpec.mw2(), sys), sys)
        assert sol.status == "optimal"
        assert sol.value == pytest.approx(((0.3 - 1.2 + 2.0) / 3) ** 2, abs=1e-12)

    def test_uniform01_anti_aligned(self):
        sys = uniform01()
        sol = lp_exact(build_cost_tensor(CostSpec.mw2(), sys), sys)
        assert sol.value == pytest.approx(0.25, abs=1e-12)
        np.testing.assert_allclose(sol.vertex_coupling.values, [[0, 0.5], [0.5, 0]], atol=1e-12)

    @pytest.mark.parametrize("a,b", [(0.0, 0.0), (1.0, 3.0), (-2.0, 0.5)])
    def test_two_deltas(self, a, b):
        sys = point_masses(a, b)
        sol = lp_exact(build_cost_tensor(CostSpec.mw2(), sys), sys)
        assert sol.value == pytest.approx(((a + b) / 2) ** 2, abs=1e-12)

    def test_vertex_is_feasible_and_value_matches(self, rng):
        for _ in range(30):
            K = int(rng.integers(2, 4))
            d = int(rng.integers(1, 3))
            sys = random_system(rng, K, d=d, uniform=False)
            cost = build_cost_tensor(random_spec(rng, K, d, "general"), sys)
            sol = lp_exact(cost, sys)
            assert sol.status == "optimal"
            assert mtv(sol.vertex_coupling, sys) < 1e-9
            val = float(np.sum(sol.vertex_coupling.values * cost.values)) - cost.shift
            assert val == pytest.approx(sol.value, abs=1e-9)

    def test_not_above_product_coupling(self, rng):
        for _ in range(60):
            K = int(rng.integers(2, 4))
            d = int(rng.integers(1, 3))
            sys = random_system(rng, K, d=d)
            cost = build_cost_tensor(random_spec(rng, K, d, "general"), sys)
            assert lp_exact(cost, sys).value <= product_coupling_value(cost, sys) + 1e-9

    @pytest.mark.parametrize("n", [2, 3, 4, 5])
    def test_agrees_with_permutation_enumeration(self, rng, n):
        for _ in range(5):
            d = int(rng.integers(1, 3))
            sys = random_system(rng, 2, sizes=[n, n], d=d)
            for kind in ("mw2", "contrast", "general"):
                cost = build_cost_tensor(random_spec(rng, 2, d, kind), sys)
                assert lp_exact(cost, sys).value == pytest.approx(permutation_min(cost), abs=1e-9)

    def test_invariant_to_atom_reordering(self, rng):
        for _ in range(20):
            K = int(rng.integers(2, 4))
            sys = random_system(rng, K, d=2, uniform=False)
            spec = random_spec(rng, K, 2, "general")
            perm = MarginalSystem(tuple(
                DiscreteMarginal(m.points[p], m.weights[p])
                for m in sys.marginals for p in [rng.permutation(m.n)]))
            v1 = lp_exact(build_cost_tensor(spec, sys), sys).value
            v2 = lp_exact(build_cost_tensor(spec, perm), perm).value
            assert v1 == pytest.approx(v2, abs=1e-9)

    def test_shift_invariance(self, rng):
        sys = random_system(rng, 3, d=1)
        C = build_cost_tensor(random_spec(rng, 3, 1, "general"), sys).preshift()
        v0 = lp_exact(CostTensor.from_array(C), sys).value
        v1 = lp_exact(CostTensor.from_array(C + 7.5), sys).value
        assert v1 - v0 == pytest.approx(7.5, abs=1e-9)

    def test_cell_cap(self):
        m = empirical_from_samples(np.arange(30.0))
        sys = MarginalSystem((m, m, m))
        with pytest.raises(CellCapError):
            lp_exact(build_cost_tensor(CostSpec.mw2(), sys), sys)

    def test_pivot_cap_reports_numerical_failure(self, rng):
        sys = random_system(rng, 3, sizes=[4, 4, 4])
        sol = lp_exact(build_cost_tensor(CostSpec.mw2(), sys), sys, max_pivots=1)
        assert sol.status == "numerical_failure"
        assert sol.vertex_coupling is None

    def test_infeasible_system(self):
        # x1 + x2 = 1 and x1 + x2 = 2 cannot both hold
        A = np.array([[1.0, 1.0], [1.0, 1.0]])
        status, x, _ = _simplex(np.zeros(2), A, np.array([1.0, 2.0]), 100)
        assert status == "infeasible" and x is None

    def test_constraint_rows_drop_redundancy(self):
        A, b = marginal_constraints((2, 3, 4), [np.full(n, 1 / n) for n in (2, 3, 4)])
        assert A.shape == (2 + 3 + 4 - 2, 24)
        assert np.linalg.matrix_rank(A) == A.shape[0]


class TestPermutationMin:
    def test_matches_bruteforce_definition(self, rng):
        C = rng.normal(size=(4, 4))
        cost = CostTensor.from_array(C)
        best = min(C[range(4), list(p)].sum() for p in itertools.permutations(range(4))) / 4
        assert permutation_min(cost) == pytest.approx(best, abs=1e-12)

    def test_rejects_non_square(self):
        with pytest.raises(ValueError):
            permutation_min(CostTensor.from_array(np.zeros((2, 3))))


class TestGaussianMW2:
    def test_three_margins(self):
        assert gaussian_mw2((2, 0.3, 0.1)) == pytest.approx(1.6**2 / 9, abs=1e-12)
        assert gaussian_mw2((2, 0.3, 0.1)) == pytest.approx(0.28444, abs=1e-5)

    def test_equal_sigmas_are_mixable(self):
        assert gaussian_mw2((1, 1)) == 0.0

    def test_one_ninth(self):
        assert gaussian_mw2((3, 1, 1)) == pytest.approx(1 / 9, abs=1e-15)

    @pytest.mark.parametrize("bad", [(0, 1), (-1, 2), (1, float("nan"))])
    def test_rejects_non_positive(self, bad):
        with pytest.raises(ValueError):
            gaussian_mw2(bad)
