import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import central_difference, grid_values, random_model, random_spd, simplex_grid

from robust_portfolio.estimation import BoxSet, EllipsoidSet, SeparableSet
from robust_portfolio.optimizer import (
    KINDS,
    ModelSpec,
    NumericalError,
    PortfolioSolution,
    SolverConfig,
    kkt_residual,
    objective_subgradient,
    objective_value,
    project_simplex,
    solve,
)

MU = np.array([0.2, 0.1])
OPT = np.array([0.5125, 0.4875])  # 0.1 = 8t - 4 on the segment x = (t, 1 - t)


class TestObjective:
    def test_mark_reference_value(self):
        assert objective_value(ModelSpec.mark(MU, np.eye(2), 2.0), [0.5, 0.5]) == pytest.approx(-0.85)

    @pytest.mark.parametrize("seed", range(5))
    def test_zero_penalties_reduce_to_mark(self, seed):
        rng = np.random.default_rng(seed)
        n = 4
        mark = random_model(rng, "mark", n)
        box = ModelSpec.box(mark.mu, mark.sigma, mark.lam, BoxSet(np.zeros(n), 0.05))
        ellip = ModelSpec.ellip(mark.mu, mark.sigma, mark.lam, EllipsoidSet(0.0, random_spd(rng, n), 0.05))
        x = rng.dirichlet(np.ones(n))
        assert objective_value(box, x) == objective_value(mark, x)
        assert objective_value(ellip, x) == objective_value(mark, x)

    def test_box_uses_absolute_value(self):
        box = ModelSpec.box(MU, np.eye(2), 1.0, BoxSet(np.array([0.1, 0.2]), 0.05))
        x = np.array([0.3, 0.7])
        assert objective_value(box, x) == pytest.approx(MU @ x - x @ x - 0.1 * 0.3 - 0.2 * 0.7)

    def test_sep_uses_worst_case_bounds(self):
        sep = SeparableSet(np.array([0.1, 0.0]), np.array([0.3, 0.2]), np.eye(2) * 0.5, np.eye(2) * 2, 0.05, 100, 0)
        model = ModelSpec.sep(1.0, sep)
        x = np.array([0.5, 0.5])
        assert objective_value(model, x) == pytest.approx(0.05 - 1.0)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            objective_value(ModelSpec.mark(MU, np.eye(2), 1.0), [1.0, 0.0, 0.0])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.0, 50.0))
    def test_ellip_penalty_non_increasing_in_radius(self, seed, extra):
        rng = np.random.default_rng(seed)
        m = random_model(rng, "ellip", 3)
        bigger = ModelSpec.ellip(m.mu, m.sigma, m.lam,
                                 EllipsoidSet(m.uncertainty.delta_sq + extra, m.uncertainty.sigma_mu, 0.05))
        x = rng.dirichlet(np.ones(3))
        assert objective_value(bigger, x) <= objective_value(m, x) + 1e-15


class TestGradient:
    @pytest.mark.parametrize("kind", KINDS)
    def test_matches_finite_differences(self, kind):
        rng = np.random.default_rng(KINDS.index(kind))
        for _ in range(20):
            model = random_model(rng, kind, 5)
            x = rng.dirichlet(np.ones(5))
            fd = central_difference(lambda z: objective_value(model, z), x)
            g = objective_subgradient(model, x)
            np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-7)

    def test_mark_closed_form(self, rng):
        m = random_model(rng, "mark", 4)
        x = rng.dirichlet(np.ones(4))
        np.testing.assert_allclose(objective_subgradient(m, x), m.mu - 2 * m.lam * m.sigma @ x)

    def test_sep_closed_form(self, rng):
        m = random_model(rng, "sep", 4)
        x = rng.dirichlet(np.ones(4))
        u = m.uncertainty
        np.testing.assert_allclose(objective_subgradient(m, x), u.mu_lo - 2 * m.lam * u.sigma_hi @ x)

    def test_ellip_with_zero_sigma_mu_is_mark(self, rng):
        mark = random_model(rng, "mark", 3)
        ellip = ModelSpec.ellip(mark.mu, mark.sigma, mark.lam, EllipsoidSet(4.0, np.zeros((3, 3)), 0.05))
        x = rng.dirichlet(np.ones(3))
        np.testing.assert_array_equal(objective_subgradient(ellip, x), objective_subgradient(mark, x))


class TestProjection:
    def test_feasible_point_fixed(self):
        np.testing.assert_allclose(project_simplex([1 / 3, 1 / 3, 1 / 3]), [1 / 3] * 3, rtol=1e-15)

    def test_uniform_shift(self):
        np.testing.assert_allclose(project_simplex([0.3, 0.3]), [0.5, 0.5], rtol=1e-15)

    def test_threshold_deactivates(self):
        np.testing.assert_array_equal(project_simplex([2.0, 0.0]), [1.0, 0.0])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=12))
    def test_optimality_conditions(self, v):
        v = np.array(v)
        x = project_simplex(v)
        assert np.all(x >= 0) and x.sum() == pytest.approx(1.0, abs=1e-12)
        # x = max(v - theta, 0): v - x is constant on the support and <= it elsewhere
        on = x > 0
        theta = (v - x)[on]
        assert np.ptp(theta) <= 1e-9 * max(1.0, np.abs(v).max())
        assert np.all(v[~on] <= theta.mean() + 1e-9 * max(1.0, np.abs(v).max()))


class TestSolve:
    def test_closed_form_two_assets(self):
        sol = solve(ModelSpec.mark(MU, np.eye(2), 2.0))
        np.testing.assert_allclose(sol.weights, OPT, atol=1e-6)
        assert sol.converged and sol.kkt_residual <= 1e-8

    @pytest.mark.parametrize("kind", KINDS)
    def test_single_asset(self, kind):
        rng = np.random.default_rng(0)
        sol = solve(random_model(rng, kind, 1))
        np.testing.assert_array_equal(sol.weights, [1.0])
        assert sol.kkt_residual == 0.0

    def test_symmetric_assets_give_uniform_weights(self):
        sol = solve(ModelSpec.mark(np.full(6, 0.1), np.eye(6), 3.0))
        np.testing.assert_allclose(sol.weights, np.full(6, 1 / 6), atol=1e-12)
        assert kkt_residual(ModelSpec.mark(np.full(6, 0.1), np.eye(6), 3.0), np.full(6, 1 / 6)) == 0.0

    def test_kkt_at_optimum_and_perturbed_point(self):
        model = ModelSpec.mark(MU, np.eye(2), 2.0)
        at_opt = kkt_residual(model, OPT)
        assert at_opt <= 1e-8
        perturbed = project_simplex(OPT + np.array([0.1, 0.0]))
        assert kkt_residual(model, perturbed) > at_opt

    @pytest.mark.parametrize("kind", KINDS)
    @pytest.mark.parametrize("n", [2, 3])
    def test_beats_simplex_grid(self, kind, n):
        rng = np.random.default_rng([n, KINDS.index(kind)])
        pts = simplex_grid(n)
        for _ in range(10):
            model = random_model(rng, kind, n)
            sol = solve(model)
            assert sol.objective >= grid_values(model, pts).max() - 1e-6
            assert sol.kkt_residual <= 1e-8

    @pytest.mark.parametrize("kind", KINDS)
    def test_monotone_ascent_and_feasibility(self, kind):
        rng = np.random.default_rng(100 + KINDS.index(kind))
        for _ in range(10):
            model = random_model(rng, kind, 12)
            sol = solve(model)
            h = np.array(sol.history)
            assert np.all(np.diff(h) >= -1e-12)
            assert sol.objective >= h[0]
            assert np.all(sol.weights >= -1e-12)
            assert abs(sol.weights.sum() - 1) <= 1e-10

    def test_box_equals_shifted_mark(self, rng):
        for _ in range(20):
            box = random_model(rng, "box", 6)
            mark = ModelSpec.mark(box.mu - box.uncertainty.delta, box.sigma, box.lam)
            a, b = solve(box), solve(mark)
            assert np.abs(a.weights - b.weights).max() <= 1e-8
            assert abs(a.objective - b.objective) <= 1e-10

    def test_ellip_continuity_at_tiny_radius(self, rng):
        for _ in range(20):
            mark = random_model(rng, "mark", 5)
            ellip = ModelSpec.ellip(mark.mu, mark.sigma, mark.lam, EllipsoidSet(1e-12, random_spd(rng, 5), 0.05))
            assert np.abs(solve(ellip).weights - solve(mark).weights).max() <= 1e-5

    def test_optimal_ellip_objective_non_increasing_in_radius(self, rng):
        base = random_model(rng, "ellip", 6)
        values = []
        for d2 in (0.0, 0.5, 2.0, 8.0, 30.0):
            m = ModelSpec.ellip(base.mu, base.sigma, base.lam, EllipsoidSet(d2, base.uncertainty.sigma_mu, 0.05))
            values.append(solve(m).objective)
        assert np.all(np.diff(values) <= 1e-12)

    def test_singular_covariance_is_linear_program(self):
        # zero risk term: optimum is the vertex with the largest mean
        sol = solve(ModelSpec.mark([0.1, 0.3, 0.2], np.zeros((3, 3)), 1.0))
        np.testing.assert_array_equal(sol.weights, [0.0, 1.0, 0.0])
        assert sol.converged

    def test_ellip_with_singular_sigma_mu(self):
        # Sigma_mu vanishes along e_1, so the norm term is nonsmooth at that vertex
        sigma_mu = np.diag([0.0, 1.0, 1.0])
        model = ModelSpec.ellip([0.5, 0.4, 0.4], np.eye(3) * 0.01, 1.0, EllipsoidSet(1.0, sigma_mu, 0.05))
        sol = solve(model)
        best = grid_values(model, simplex_grid(3)).max()
        assert sol.objective >= best - 1e-6

    def test_diminishing_rule_also_ascends(self):
        model = ModelSpec.mark(MU, np.eye(2), 2.0)
        sol = solve(model, SolverConfig(step_rule="diminishing", newton_polish=False, max_iterations=20_000))
        np.testing.assert_allclose(sol.weights, OPT, atol=1e-6)
        assert np.all(np.diff(sol.history) >= 0)

    def test_not_converged_flag(self, rng):
        model = random_model(rng, "ellip", 20)
        sol = solve(model, SolverConfig(max_iterations=1, newton_polish=False))
        assert not sol.converged and sol.iterations == 1
        assert sol.objective >= objective_value(model, np.full(20, 1 / 20))

    def test_nan_input_raises_numeric_error(self):
        model = ModelSpec.mark([np.nan, 0.1], np.eye(2), 1.0)
        with pytest.raises(NumericalError) as info:
            solve(model)
        assert info.value.last_iterate.shape == (2,)

    def test_start_vector(self):
        model = ModelSpec.mark(MU, np.eye(2), 2.0)
        sol = solve(model, SolverConfig(start=np.array([1.0, 0.0])))
        np.testing.assert_allclose(sol.weights, OPT, atol=1e-9)
        with pytest.raises(ValueError):
            solve(model, SolverConfig(start=np.array([0.7, 0.7])))


class TestModelSpec:
    def test_validation(self):
        with pytest.raises(ValueError):
            ModelSpec.mark(MU, np.eye(2), 0.0)
        with pytest.raises(ValueError):
            ModelSpec("cvar", MU, np.eye(2), 1.0)
        with pytest.raises(TypeError):
            ModelSpec("box", MU, np.eye(2), 1.0, None)
        with pytest.raises(ValueError):
            ModelSpec.mark(MU, np.eye(3), 1.0)

    @pytest.mark.parametrize("kind", KINDS)
    def test_json_round_trip(self, kind, rng):
        model = random_model(rng, kind, 3)
        back = ModelSpec.from_dict(json.loads(json.dumps(model.to_dict())))
        assert back.kind == kind and back.lam == model.lam
        x = rng.dirichlet(np.ones(3))
        assert objective_value(back, x) == objective_value(model, x)
        sol = solve(model)
        sol2 = PortfolioSolution.from_dict(json.loads(json.dumps(sol.to_dict())))
        np.testing.assert_array_equal(sol2.weights, sol.weights)
        assert sol2.kkt_residual == sol.kkt_residual
