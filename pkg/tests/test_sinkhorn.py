import numpy as np
import pytest

from conftest import random_spec, random_system
from motbounds import greenkhorn, sinkhorn
from motbounds.cost import CostSpec, CostTensor, build_cost_tensor, build_factored_cost
from motbounds.errors import NumericalError
from motbounds.kernels import lse_mat, logsumexp
from motbounds.measures import DiscreteMarginal, MarginalSystem, empirical_from_samples
from motbounds.oracle import lp_exact
from motbounds.sinkhorn import (Potentials, SolverConfig, default_eta, dual_lower_bound, kl_terms,
                                mtv, round_to_feasible, solve)


def uniform01():
    m = empirical_from_samples([[0.0], [1.0]])
    return MarginalSystem((m, m))


class TestMtv:
    def test_product_of_marginals(self, rng):
        sys = random_system(rng, 3, uniform=False)
        w = sys.weights
        gamma = np.einsum("i,j,k->ijk", *w)
        assert mtv(gamma, sys) == pytest.approx(0.0, abs=1e-15)

    def test_uniform_vs_point_masses(self):
        d = DiscreteMarginal([0.0, 1.0], [1.0 - 1e-15, 1e-15])
        sys = MarginalSystem((d, d))
        assert mtv(np.full((2, 2), 0.25), sys) == pytest.approx(2.0, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mtv(np.ones((3, 2)) / 6, uniform01())


class TestRounding:
    def test_feasible_unchanged(self, rng):
        sys = random_system(rng, 3, uniform=False)
        gamma = np.einsum("i,j,k->ijk", *sys.weights)
        np.testing.assert_allclose(round_to_feasible(gamma, sys).values, gamma, atol=1e-12)

    def test_perturbed_product(self, rng):
        sys = random_system(rng, 2, sizes=[4, 5], uniform=False)
        a = sys.weights[0] * rng.uniform(0.8, 1.2, 4)
        b = sys.weights[1] * rng.uniform(0.8, 1.2, 5)
        out = round_to_feasible(np.outer(a, b), sys)
        for got, want in zip(out.marginals(), sys.weights):
            np.testing.assert_allclose(got, want, atol=1e-10)

    def test_mass_deficit_restored(self, rng):
        sys = random_system(rng, 3, uniform=False)
        gamma = 0.9 * np.einsum("i,j,k->ijk", *sys.weights)
        out = round_to_feasible(gamma, sys)
        assert out.mass == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(out.values, gamma / 0.9, atol=1e-12)

    def test_degenerate_error_skips_correction(self):
        sys = uniform01()
        gamma = np.array([[0.5, 0.0], [0.0, 0.5]])
        np.testing.assert_array_equal(round_to_feasible(gamma, sys).values, gamma)


class TestDualBound:
    def test_zero_potentials(self, rng):
        sys = random_system(rng, 3)
        zeros = [np.zeros(n) for n in sys.shape]
        assert dual_lower_bound(zeros, sys, 10.0, shift=0.7) == -0.7
        assert dual_lower_bound(Potentials(tuple(zeros)), sys, 3.0) == 0.0

    def test_potentials_must_be_finite(self):
        with pytest.raises(NumericalError):
            Potentials((np.array([0.0, np.inf]),))

    def test_kl_terms(self):
        mu = [np.array([0.5, 0.5]), np.array([1.0, 0.0])]
        lg = [np.log([0.5, 0.5]), np.log([0.5, 0.5])]
        np.testing.assert_allclose(kl_terms(mu, lg), [0.0, np.log(2)], atol=1e-15)

    def test_default_eta(self):
        assert default_eta((1, 1), 1e-3) == 1.0
        assert default_eta((2, 4), 0.5) == pytest.approx(4 * np.log(8) / 0.5)


class TestSolve:
    def test_point_masses(self):
        z = empirical_from_samples([[0.0]])
        sys = MarginalSystem((z, z, z))
        r = solve(build_cost_tensor(CostSpec.mw2(), sys), sys)
        assert r.primal_value == 0.0 and r.converged and r.iterations <= 1

    def test_uniform01(self):
        sys = uniform01()
        r = solve(build_cost_tensor(CostSpec.mw2(), sys), sys, SolverConfig(epsilon=1e-3))
        assert r.converged
        assert abs(r.primal_value - 0.25) <= 1e-3
        assert r.dual_lower_bound <= 0.25 + 1e-12

    def test_sandwich_against_lp(self, rng):
        for trial in range(40):
            K = int(rng.integers(2, 4))
            d = int(rng.integers(1, 3))
            sys = random_system(rng, K, d=d, uniform=bool(trial % 2))
            spec = random_spec(rng, K, d, ("mw2", "contrast", "general")[trial % 3])
            cost = build_cost_tensor(spec, sys)
            lp = lp_exact(cost, sys).value
            r = solve(cost, sys, SolverConfig(epsilon=1e-3))
            assert r.converged
            assert r.dual_lower_bound <= lp + 1e-9 <= r.primal_value + 2e-9
            assert r.primal_value - r.dual_lower_bound <= 1e-3 + 1e-9
            assert mtv(r.coupling, sys) < 1e-10

    def test_rounded_coupling_invariants(self, rng):
        sys = random_system(rng, 3, sizes=[4, 3, 4], d=2, uniform=False)
        r = solve(build_cost_tensor(CostSpec.mw2(), sys), sys)
        g = r.coupling.values
        assert g.min() >= 0 and g.sum() == pytest.approx(1.0, abs=1e-12)
        for got, want in zip(r.coupling.marginals(), sys.weights):
            np.testing.assert_allclose(got, want, atol=1e-10)

    def test_shift_equivariance(self, rng):
        sys = random_system(rng, 3, d=1)
        C = build_cost_tensor(random_spec(rng, 3, 1, "general"), sys).preshift()
        a = solve(CostTensor.from_array(C), sys)
        b = solve(CostTensor.from_array(C + 4.25), sys)
        assert b.dual_lower_bound - a.dual_lower_bound == pytest.approx(4.25, abs=1e-9)
        assert b.primal_value - a.primal_value == pytest.approx(4.25, abs=1e-9)

    def test_deterministic_trace(self, rng):
        sys = random_system(rng, 3, sizes=[3, 4, 3])
        cost = build_cost_tensor(CostSpec.contrast([1, -1, 0.5]), sys)
        cfg = SolverConfig(record_trace=True)
        t1 = solve(cost, sys, cfg).trace
        t2 = solve(cost, sys, cfg).trace
        assert t1 and [r.to_json() for r in t1] == [r.to_json() for r in t2]

    def test_trace_selects_largest_kl(self, rng):
        sys = random_system(rng, 3, sizes=[3, 4, 3], uniform=False)
        cost = build_cost_tensor(CostSpec.mw2(), sys)
        r = solve(cost, sys, SolverConfig(record_trace=True, anneal_factor=None,
                                          eta_override=5.0, max_iters=5))
        from motbounds.kernels import DenseKernel
        from motbounds.sinkhorn import _normalise
        kernel = DenseKernel(cost, sys)
        m = _normalise(kernel, [np.zeros(n) for n in sys.shape], 5.0)
        for rec in r.trace:
            g = kernel.log_marginals(m, 5.0)
            kl = kl_terms(kernel.mus, g)
            assert rec.margin_selected == int(np.argmax(kl))
            k = rec.margin_selected
            m[k] = m[k] + np.log(kernel.mus[k]) - g[k]

    def test_trace_bounds_are_valid(self, rng):
        sys = random_system(rng, 3, sizes=[3, 3, 4])
        cost = build_cost_tensor(CostSpec.mw2(), sys)
        lp = lp_exact(cost, sys).value
        r = solve(cost, sys, SolverConfig(record_trace=True))
        assert all(rec.dual_bound <= lp + 1e-9 for rec in r.trace)

    def test_non_converged_still_valid(self, rng):
        sys = random_system(rng, 3, sizes=[4, 4, 4])
        cost = build_cost_tensor(CostSpec.mw2(), sys)
        lp = lp_exact(cost, sys).value
        r = solve(cost, sys, SolverConfig(epsilon=1e-9, max_iters=3))
        assert not r.converged and r.iterations == 3
        assert r.dual_lower_bound <= lp + 1e-9 <= r.primal_value + 1e-9
        assert mtv(r.coupling, sys) < 1e-10

    def test_log_domain_safety(self, rng):
        sys = random_system(rng, 3, sizes=[3, 4, 3])
        C = rng.uniform(-1e3, 1e3, sys.shape)
        cost = CostTensor.from_array(C)
        lp = lp_exact(cost, sys).value
        r = solve(cost, sys, SolverConfig(eta_override=1e6, anneal_factor=None, max_iters=2000))
        assert np.isfinite(r.primal_value) and np.isfinite(r.dual_lower_bound)
        assert r.dual_lower_bound <= lp + 1e-9
        assert np.all(np.isfinite(np.concatenate(r.potentials.m)))

    def test_shape_mismatch(self, rng):
        sys = random_system(rng, 2, sizes=[2, 3])
        with pytest.raises(ValueError):
            solve(CostTensor.from_array(np.zeros((3, 2))), sys)

    def test_non_finite_reports_iteration(self, rng, monkeypatch):
        sys = random_system(rng, 2, sizes=[3, 3])
        cost = build_cost_tensor(CostSpec.mw2(), sys)
        from motbounds import kernels
        real = kernels.DenseKernel.log_marginals
        calls = {"n": 0}

        def flaky(self, m, eta):
            calls["n"] += 1
            out = real(self, m, eta)
            if calls["n"] > 3:
                out[1] = out[1] * np.nan
            return out

        monkeypatch.setattr(kernels.DenseKernel, "log_marginals", flaky)
        with pytest.raises(NumericalError) as exc:
            solve(cost, sys, SolverConfig(anneal_factor=None))
        assert exc.value.iteration is not None and exc.value.margin == 1


class TestFactored:
    def test_matches_dense(self, rng):
        sys = MarginalSystem(tuple(empirical_from_samples(rng.normal(0, s, (12, 2)))
                                   for s in (1.0, 0.5, 0.2)))
        for spec in (CostSpec.mw2(), CostSpec.contrast([1, -0.5, -0.5], sign="max")):
            a = solve(build_cost_tensor(spec, sys), sys)
            b = solve(build_factored_cost(spec, sys), sys)
            assert b.dual_lower_bound == pytest.approx(a.dual_lower_bound, abs=1e-9)
            assert b.primal_value == pytest.approx(a.primal_value, abs=1e-9)
            dense = b.coupling.dense()
            assert mtv(dense, sys) < 1e-10
            fc = build_factored_cost(spec, sys)
            assert float(np.sum(dense * fc.dense())) - fc.shift == pytest.approx(b.primal_value, abs=1e-9)

    def test_against_lp(self, rng):
        sys = random_system(rng, 3, sizes=[4, 3, 4], d=2, uniform=False)
        spec = random_spec(rng, 3, 2, "general")
        lp = lp_exact(build_cost_tensor(spec, sys), sys).value
        r = solve(build_factored_cost(spec, sys), sys)
        assert r.converged and r.dual_lower_bound <= lp + 1e-9 <= r.primal_value + 1e-9
        assert r.primal_value - lp <= 1e-3


    def test_lse_mat_pruning_is_exact_where_it_matters(self, rng):
        n = 30
        X = rng.normal(0, 400, (n, n))
        Y = rng.normal(0, 400, (n, n))
        A = rng.normal(0, 400, (n, n))
        exact = logsumexp(X[:, None, :] + Y[None, :, :], axis=2)
        full = lse_mat(X, Y)
        assert np.allclose(full, exact, rtol=0, atol=1e-9)
        pruned = lse_mat(X, Y, [(A, 1), (A, 0)])
        # the consumer's sums agree even where individual entries were left underflowed
        for axis in (0, 1):
            assert np.allclose(logsumexp(A + pruned, axis=axis), logsumexp(A + exact, axis=axis),
                               rtol=0, atol=1e-12)

    def test_stage_stall_keeps_certificate(self, rng):
        sys = MarginalSystem(tuple(empirical_from_samples(rng.normal(0, s, (25, 2)))
                                   for s in (1.0, 0.5, 0.2)))
        cost = build_factored_cost(CostSpec.mw2(), sys)
        base = SolverConfig(stall_tol=1e-3)
        a = solve(cost, sys, base)
        b = solve(cost, sys, SolverConfig(stall_tol=1e-3, stage_stall_tol=1e-4))
        assert b.iterations <= a.iterations
        assert b.dual_lower_bound <= b.primal_value + 1e-12
        assert abs(b.dual_lower_bound - a.dual_lower_bound) <= 1e-3


class TestGreenkhorn:
    def test_rho_values(self):
        assert greenkhorn.rho(0.7, 0.7) == 0.0
        assert greenkhorn.rho(1, 2) == pytest.approx(1 - np.log(2))
        assert greenkhorn.rho(0, 0.5) == 0.5

    @pytest.mark.parametrize("a,b", [(1, 0), (1, -1), (-0.1, 1)])
    def test_rho_domain(self, a, b):
        with pytest.raises(ValueError):
            greenkhorn.rho(a, b)

    def test_point_masses(self):
        z = empirical_from_samples([[0.0]])
        sys = MarginalSystem((z, z))
        r = greenkhorn.solve(build_cost_tensor(CostSpec.mw2(), sys), sys)
        assert r.primal_value == 0.0 and r.converged and r.iterations == 0

    def test_uniform01_agrees_with_sinkhorn(self):
        sys = uniform01()
        cost = build_cost_tensor(CostSpec.mw2(), sys)
        g = greenkhorn.solve(cost, sys)
        s = solve(cost, sys)
        assert abs(g.primal_value - 0.25) <= 1e-3
        assert abs(g.primal_value - s.primal_value) <= 2e-3

    def test_random_three_margins(self, rng):
        for _ in range(15):
            sys = random_system(rng, 3, sizes=[3, 3, 3])
            cost = build_cost_tensor(random_spec(rng, 3, 1, "general"), sys)
            lp = lp_exact(cost, sys).value
            r = greenkhorn.solve(cost, sys)
            assert r.converged and abs(r.primal_value - lp) <= 1e-3
            assert r.dual_lower_bound <= lp + 1e-9

    def test_trace_format_and_ties(self):
        m = DiscreteMarginal([0.0, 1.0], [0.3, 0.7])
        sys = MarginalSystem((m, m))
        # constant cost: both margins start uniform, so margin 0 and margin 1 tie on atom 0
        cost = CostTensor.from_array(np.ones((2, 2)))
        r = greenkhorn.solve(cost, sys, SolverConfig(record_trace=True))
        assert r.trace[0].margin_selected == {"margin": 0, "atom": 0}
        again = greenkhorn.solve(cost, sys, SolverConfig(record_trace=True))
        assert [t.to_json() for t in r.trace] == [t.to_json() for t in again.trace]

    def test_rejects_factored(self, rng):
        sys = random_system(rng, 3, sizes=[2, 2, 2])
        with pytest.raises(TypeError):
            greenkhorn.solve(build_factored_cost(CostSpec.mw2(), sys), sys)
