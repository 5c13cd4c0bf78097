import math
from dataclasses import replace

import numpy as np
import pytest

import neuropt.cases as cs
import neuropt.nlpsolve as nl
from helpers import min_snap_qp_solution
from neuropt.cases.minsnap import coefficients_to_decision


class TestAnalyticDensity:
    def test_saturates_at_amplitude(self):
        dp = cs.DensityFieldParams(blobs=(cs.BlobSpec((1.0, 2.0, 3.0), 0.5, 4.0, 200.0),))
        assert abs(cs.analytic_density([1.0, 2.0, 3.0], dp) - 4.0) < 1e-6

    def test_half_amplitude_on_surface(self):
        dp = cs.DensityFieldParams(blobs=(cs.BlobSpec((0.0, 0.0, 0.0), 0.5, 4.0, 30.0),))
        assert abs(cs.analytic_density([0.5, 0.0, 0.0], dp) - 2.0) < 1e-12

    def test_empty_field_is_zero(self):
        dp = cs.DensityFieldParams()
        assert cs.analytic_density([0.3, -0.4, 0.5], dp) == 0.0

    def test_symbolic_density_matches_numeric(self):
        _, dp = cs.default_traj_scenario()
        fn = cs.density_function(dp)
        rng = np.random.default_rng(0)
        for _ in range(50):
            p = rng.uniform(-1.5, 1.5, size=3)
            sym = fn(p.reshape(3, 1))[0][0, 0]
            assert abs(sym - cs.analytic_density(p, dp)) < 1e-12


class TestPolyEval:
    def test_constant_polynomial(self):
        coeffs = np.zeros((10, 3))
        coeffs[0] = [1.0, 2.0, 3.0]
        assert (cs.poly_eval(coeffs, 1.7, 0) == np.array([1.0, 2.0, 3.0])).all()
        for d in range(1, 5):
            assert (cs.poly_eval(coeffs, 1.7, d) == 0.0).all()

    def test_quartic_snap_is_factorial(self):
        coeffs = np.zeros((10, 3))
        coeffs[4] = [2.0, -1.0, 0.5]
        for t in (0.0, 1.3, 4.0):
            assert (cs.poly_eval(coeffs, t, 4) == 24.0 * coeffs[4]).all()

    def test_linear_derivative(self):
        coeffs = np.zeros((10, 3))
        coeffs[1] = [3.0, 0.0, -2.0]
        for t in (0.0, 2.5):
            assert (cs.poly_eval(coeffs, t, 1) == coeffs[1]).all()

    def test_derivative_order_validated(self):
        with pytest.raises(cs.ScenarioError):
            cs.poly_eval(np.zeros((10, 3)), 0.0, 5)

    def test_fd_consistency_across_orders(self):
        rng = np.random.default_rng(1)
        coeffs = rng.uniform(-1, 1, size=(10, 3)) * (0.5 ** np.arange(10))[:, None]
        h = 1e-6
        for d in range(4):
            for t in (0.3, 1.1, 2.7):
                fd = (cs.poly_eval(coeffs, t + h, d) - cs.poly_eval(coeffs, t - h, d)) / (2 * h)
                exact = cs.poly_eval(coeffs, t, d + 1)
                denom = np.maximum(1.0, np.abs(exact))
                assert (np.abs(fd - exact) / denom).max() < 1e-6

    def test_decision_round_trip(self):
        tp, _ = cs.default_traj_scenario()
        rng = np.random.default_rng(2)
        coeffs = rng.uniform(-1, 1, size=(10, 3))
        back = cs.coefficients_from_solution(tp, coefficients_to_decision(tp, coeffs))
        assert np.abs(back - coeffs).max() < 1e-12


class TestBuildNlp:
    def test_unconstrained_qp_matches_closed_form(self):
        tp, dp = cs.default_traj_scenario()
        problem = cs.build_min_snap_nlp(tp, dp, include_density=False)
        sol = nl.solve(problem)
        assert sol.status is nl.SolveStatus.CONVERGED
        mine = cs.coefficients_from_solution(tp, sol.x)
        oracle = min_snap_qp_solution(tp)
        denom = max(1.0, float(np.abs(oracle).max()))
        assert np.abs(mine - oracle).max() / denom < 1e-6

    def test_degree_three_curve_has_zero_snap(self):
        tp, dp = cs.default_traj_scenario()
        problem = cs.build_min_snap_nlp(tp, dp, include_density=False)
        cubic = np.zeros((10, 3))
        cubic[:4] = np.array([[0.1, 0.2, 0.3],
                              [1.0, -0.5, 0.25],
                              [0.0, 0.4, -0.2],
                              [0.05, 0.0, 0.1]])
        x = coefficients_to_decision(tp, cubic)
        assert problem.eval_objective(x) <= 1e-18

    def test_density_rows_present(self):
        tp, dp = cs.default_traj_scenario()
        with_density = cs.build_min_snap_nlp(tp, dp, include_density=True)
        without = cs.build_min_snap_nlp(tp, dp, include_density=False)
        assert with_density.m == without.m + tp.n_samples + 1
        cap = tp.rho_bar - cs.DENSITY_MARGIN
        assert np.allclose(with_density.constraint_upper[-(tp.n_samples + 1):], cap)

    def test_mlp_density_dimension_checked(self):
        import neuropt.learned as ln
        tp, _ = cs.default_traj_scenario()
        bad = ln.make_mlp_spec([(np.zeros((1, 2)), np.zeros(1))])
        with pytest.raises(cs.ScenarioError):
            cs.build_min_snap_nlp(tp, bad, include_density=True)


class TestTwoPhase:
    def test_no_blob_matches_qp_oracle(self):
        tp, _ = cs.default_traj_scenario()
        empty = cs.DensityFieldParams()
        sol1, sol2 = cs.solve_two_phase(tp, empty)
        assert sol2.status is nl.SolveStatus.CONVERGED
        mine = cs.coefficients_from_solution(tp, sol2.x)
        oracle = min_snap_qp_solution(tp)
        denom = max(1.0, float(np.abs(oracle).max()))
        assert np.abs(mine - oracle).max() / denom < 1e-6

    def test_standard_scenario_clears_obstacle(self):
        tp, dp = cs.default_traj_scenario()
        sol1, sol2 = cs.solve_two_phase(tp, dp)
        assert sol1.status is nl.SolveStatus.CONVERGED
        assert sol2.status is nl.SolveStatus.CONVERGED
        coeffs = cs.coefficients_from_solution(tp, sol2.x)
        for t in tp.grid:
            assert cs.density_value(dp, cs.poly_eval(coeffs, t)) < tp.rho_bar

    def test_boundary_conditions_at_solution(self):
        tp, dp = cs.default_traj_scenario()
        _, sol2 = cs.solve_two_phase(tp, dp)
        coeffs = cs.coefficients_from_solution(tp, sol2.x)
        assert np.abs(cs.poly_eval(coeffs, 0.0, 0) - tp.p0).max() <= 1e-6
        assert np.abs(cs.poly_eval(coeffs, tp.total_time, 0) - tp.pf).max() <= 1e-6
        for d in (1, 2):
            assert np.abs(cs.poly_eval(coeffs, 0.0, d)).max() <= 1e-6
            assert np.abs(cs.poly_eval(coeffs, tp.total_time, d)).max() <= 1e-6

    def test_waypoint_inside_obstacle_rejected(self):
        tp, dp = cs.default_traj_scenario()
        bad = replace(tp, waypoints=(cs.Waypoint(time=2.0, point=(0.0, 0.0, 0.25)),))
        with pytest.raises(cs.TwoPhaseError, match="collision-free"):
            cs.solve_two_phase(bad, dp)

    def test_undershooting_waypoints_reported(self):
        # Waypoints that barely clear the blob leave the phase-1 polynomial
        # sagging into it; the hand-off must fail with actionable advice.
        tp, dp = cs.default_traj_scenario()
        wps = []
        for w in range(1, 6):
            t_w = w * tp.total_time / 6.0
            pt = np.array(tp.p0) + (t_w / tp.total_time) * (np.array(tp.pf) - np.array(tp.p0))
            rho = cs.density_value(dp, pt)
            if rho >= tp.rho_bar:
                pt = pt + np.array([0.0, 0.0, 0.62])
            wps.append(cs.Waypoint(time=t_w, point=tuple(pt)))
        bad = replace(tp, waypoints=tuple(wps))
        with pytest.raises(cs.TwoPhaseError, match="waypoint"):
            cs.solve_two_phase(bad, dp)

    def test_variants_all_converge(self):
        for tp, dp in cs.traj_scenario_variants():
            _, sol2 = cs.solve_two_phase(tp, dp)
            assert sol2.status is nl.SolveStatus.CONVERGED

    def test_fitted_density_model_route(self):
        tp, dp = cs.default_traj_scenario()
        fit = cs.fit_density_model(tp, dp, n_samples=4000, epochs=800, seed=0)
        _, sol2 = cs.solve_two_phase(tp, fit.spec)
        assert sol2.status is nl.SolveStatus.CONVERGED
        coeffs = cs.coefficients_from_solution(tp, sol2.x)
        cap = tp.rho_bar - cs.DENSITY_MARGIN
        model_max = max(
            cs.density_value(fit.spec, cs.poly_eval(coeffs, t)) for t in tp.grid
        )
        assert model_max <= cap + 1e-8
        # sanity report: re-evaluating under the analytic oracle may only
        # drift by a small multiple of the model's held-out error
        true_max = max(
            cs.density_value(dp, cs.poly_eval(coeffs, t)) for t in tp.grid
        )
        rms = float(np.sqrt(fit.holdout_mse))
        print(f"analytic-density drift {abs(true_max - model_max):.4f} "
              f"vs held-out RMS {rms:.4f}")


class TestScenarioIo:
    def test_round_trip(self):
        tp, dp = cs.default_traj_scenario()
        tp = replace(tp, waypoints=(cs.Waypoint(1.0, (0.0, 0.5, 1.0)),))
        doc = cs.traj_scenario_to_dict(tp, dp)
        tp2, dp2 = cs.traj_scenario_from_dict(doc)
        assert tp2 == tp and dp2 == dp

    def test_unknown_key_rejected(self):
        doc = cs.traj_scenario_to_dict(*cs.default_traj_scenario())
        doc["extra"] = True
        with pytest.raises(cs.ScenarioError, match="extra"):
            cs.traj_scenario_from_dict(doc)

    def test_csv_format(self):
        tp, dp = cs.default_traj_scenario()
        coeffs = min_snap_qp_solution(tp)
        text = cs.trajectory_csv(tp, coeffs, dp)
        lines = text.strip().splitlines()
        assert lines[0] == "k,t,px,py,pz,rho"
        assert len(lines) == tp.n_samples + 2
        first = lines[1].split(",")
        assert first[0] == "0"
        assert abs(float(first[2]) - tp.p0[0]) < 1e-9
