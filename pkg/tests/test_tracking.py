import csv
import io

import numpy as np
import pytest

from redhes.powerflow import LoadVector
from redhes.reduction import reduce_at, reduced_objective
from redhes.tracking import (CSV_COLUMNS, LoadScenario, TrackingTrace, optimal_parameters,
                             run_tracking, solve_newton_system, tracking_step)


@pytest.fixture(scope="module")
def optimum9(problem9):
    return optimal_parameters(problem9, problem9.initial_parameters())


class TestNewtonSystem:
    def test_positive_definite(self):
        H = np.array([[4.0, 1.0], [1.0, 3.0]])
        g = np.array([1.0, 2.0])
        d, tau = solve_newton_system(H, g)
        assert tau == 0.0
        np.testing.assert_allclose(H @ d, -g, rtol=1e-14)
        assert g @ d < 0

    def test_indefinite_falls_back(self):
        H = np.diag([2.0, -1e-3])
        g = np.array([1.0, 1.0])
        d, tau = solve_newton_system(H, g)
        assert tau > 1e-3
        np.testing.assert_allclose((H + tau * np.eye(2)) @ d, -g, rtol=1e-12)
        assert g @ d < 0

    def test_semidefinite(self):
        d, tau = solve_newton_system(np.zeros((2, 2)), np.array([1.0, 0.0]))
        assert tau == 1e-6
        np.testing.assert_allclose(d, [-1e6, 0.0])


class TestToy:
    def test_one_step_reaches_optimum(self, toy):
        p0 = np.array([3.0, -1.0, 2.0, 0.5])
        p1, rec, _ = tracking_step(toy, p0, batch_size=2)
        np.testing.assert_allclose(p1, 0.0, atol=1e-13)
        assert rec.descent < 0
        assert rec.tau == 0.0

    def test_fixed_point(self, toy):
        p = np.zeros(toy.n_p)
        p1, rec, _ = tracking_step(toy, p, batch_size=4)
        np.testing.assert_array_equal(p1, p)
        assert rec.step_norm == 0.0


class TestTracking:
    def test_constant_loads_at_optimum(self, case9, optimum9):
        p_star, f_star, x_star = optimum9
        scen = LoadScenario.constant(LoadVector.from_network(case9), 4)
        trace = run_tracking(case9, scen, p_star, batch_size=4, x0=x_star)
        assert not any(r.failed for r in trace)
        assert trace.column("step_norm").max() <= 1e-6
        np.testing.assert_allclose(trace.column("cost"), f_star, rtol=1e-10)

    @pytest.mark.parametrize("fixture", ["problem9", "problem118"])
    def test_perturbed_start_contracts(self, fixture, request):
        prob = request.getfixturevalue(fixture)
        p_star, _, x_star = optimal_parameters(prob, prob.initial_parameters())
        rng = np.random.default_rng(0)
        p0 = p_star + 0.01 * rng.standard_normal(prob.n_p)
        scen = LoadScenario.constant(prob.loads, 6)
        trace = run_tracking(prob.network, scen, p0, batch_size=16, x0=x_star)
        assert not any(r.failed for r in trace)
        g = trace.column("grad_norm")
        floor = 1e-7 * g[0]
        for a, b in zip(g[:5], g[1:6]):
            assert b < a or b <= floor

    def test_descent_property(self, case9):
        scen = LoadScenario.sinusoidal(LoadVector.from_network(case9), 12, amplitude=0.05)
        trace = run_tracking(case9, scen, case9.case_parameters(), batch_size=8)
        for r in trace:
            assert r.tau == 0.0
            assert r.descent < 0 or r.grad_norm == 0

    def test_failed_period_keeps_parameters(self, case9):
        base = LoadVector.from_network(case9)
        scen = [base, base.scaled(25.0), base.scaled(1.01)]
        trace = run_tracking(case9, scen, case9.case_parameters(), batch_size=8)
        assert not trace[0].failed
        assert trace[1].failed and trace[1].status.startswith("failed: ")
        np.testing.assert_array_equal(trace[2].p, trace[1].p)
        assert not trace[2].failed

    def test_oracle_columns(self, case9):
        scen = LoadScenario.sinusoidal(LoadVector.from_network(case9), 4)
        trace = run_tracking(case9, scen, case9.case_parameters(), batch_size=8, oracle=True)
        assert np.all(np.isfinite(trace.column("max_dev")))
        assert np.isfinite(trace.median_deviation())
        assert np.all(trace.column("median_dev") <= trace.column("max_dev"))
        # the oracle optimum never costs more than the tracked point
        assert np.all(trace.column("cost_optimal") <= trace.column("cost") * (1 + 1e-12))

    def test_thread_invariance(self, case9):
        scen = LoadScenario.random_walk(LoadVector.from_network(case9), 5, seed=3)
        a = run_tracking(case9, scen, case9.case_parameters(), batch_size=2, threads=1)
        b = run_tracking(case9, scen, case9.case_parameters(), batch_size=2, threads=4)
        c = run_tracking(case9, scen, case9.case_parameters(), batch_size=2, threads=1)
        for ra, rb, rc in zip(a, b, c):
            np.testing.assert_allclose(rb.p, ra.p, rtol=0, atol=1e-12)
            np.testing.assert_array_equal(rc.p, ra.p)
            assert rc.cost == ra.cost

    def test_csv(self, case9):
        scen = LoadScenario.constant(LoadVector.from_network(case9), 2)
        trace = run_tracking(case9, scen, case9.case_parameters(), batch_size=8)
        buf = io.StringIO()
        trace.write_csv(buf)
        rows = list(csv.DictReader(io.StringIO(buf.getvalue())))
        assert tuple(rows[0]) == CSV_COLUMNS
        assert len(rows) == 2
        assert float(rows[1]["cost"]) == trace[1].cost

    def test_empty_trace(self):
        assert np.isnan(TrackingTrace().median_deviation())


class TestScenarios:
    def test_sinusoidal_bounds(self, case118):
        base = LoadVector.from_network(case118)
        scen = LoadScenario.sinusoidal(base, 60, amplitude=0.05)
        assert len(scen) == 60
        mask = base.p_load != 0
        for lv in scen:
            ratio = lv.p_load[mask] / base.p_load[mask]
            assert np.all(np.abs(ratio - 1) <= 0.05 + 1e-15)
        np.testing.assert_array_equal(scen[0].p_load, base.p_load)

    def test_random_walk_seeded(self, case118):
        base = LoadVector.from_network(case118)
        a = LoadScenario.random_walk(base, 30, seed=1)
        b = LoadScenario.random_walk(base, 30, seed=1)
        c = LoadScenario.random_walk(base, 30, seed=2)
        for la_, lb in zip(a, b):
            np.testing.assert_array_equal(la_.p_load, lb.p_load)
        assert any(np.any(x.p_load != y.p_load) for x, y in zip(a, c))
        mask = base.q_load != 0
        for lv in a:
            r = lv.q_load[mask] / base.q_load[mask]
            assert np.all((r >= 0.95 - 1e-15) & (r <= 1.05 + 1e-15))

    def test_invalid(self, case9):
        base = LoadVector.from_network(case9)
        with pytest.raises(ValueError):
            LoadScenario.sinusoidal(base, 10, amplitude=1.0)
        with pytest.raises(ValueError):
            LoadScenario.random_walk(base, 10, sigma=-1.0)
        with pytest.raises(ValueError):
            LoadScenario.constant(base, 0)


def test_oracle_reaches_stationarity(problem118):
    p0 = problem118.initial_parameters()
    p, f, x = optimal_parameters(problem118, p0)
    ws = reduce_at(problem118, p, x0=x, tol=1e-10)
    assert np.abs(ws.gradient).max() <= 1e-6
    f0, _ = reduced_objective(problem118, p0)
    assert f < f0
