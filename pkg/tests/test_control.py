import numpy as np
import pytest

import oracles
from netmpc.control import (
    MpcConfig,
    MpcProblem,
    MpcSolution,
    SolverConfig,
    check_shifted_candidate,
    ramp_start,
    repair_rate_limits,
    smoothing_penalty,
    solve_mpc,
    solve_myopic,
    stage_cost,
    total_cost,
    uniform_rate,
    warm_start,
)
from netmpc.errors import ColdStartInfeasibleError, ContractError
from netmpc.integrator import StepConfig
from netmpc.netmodel import ControlVector, EpiParams, EpiState, ForecastProfile, TransmissionRate
from netmpc.spectral import infected_matrix_array

BETA = TransmissionRate(0.3, 0.45)
STEP = StepConfig(7.0, 18)


@pytest.fixture
def node(one_node):
    """Single node whose worst case is twice the nominal transmission."""
    return one_node.with_params(EpiParams(beta_max_a=0.6, beta_max_s=0.9))


def cfg(**kw):
    kw.setdefault("step", STEP)
    return MpcConfig(**kw)


def flat(beta=BETA, h=7):
    return ForecastProfile([beta] * h)


def lam_closed(model, s, q, beta=BETA):
    m = infected_matrix_array(np.atleast_1d(s), np.asarray(q, float), beta.as_array(), model.flow, model.params)
    return oracles.abscissa_2x2(m)


class TestCosts:
    def test_zero_stage_cost(self, one_node):
        assert stage_cost(EpiState([1], [0], [0], [0]), ControlVector.uniform(1, 0), one_node, cfg()) == 0.0

    def test_worked_stage_cost(self, one_node):
        c = stage_cost(EpiState([0.5], [0.1], [0.1], [0.1]), ControlVector.uniform(1, 1.0), one_node, cfg(rho=0.1))
        assert c == pytest.approx(0.2, abs=1e-15)

    def test_weights_make_cost_population_free(self, params):
        from netmpc.netmodel import NetworkModel

        small = NetworkModel(np.array([10.0, 30.0]), np.ones((2, 2)), params)
        big = NetworkModel(np.array([1e6, 3e6]), np.ones((2, 2)), params)
        x, q = EpiState([1, 1], [0, 0], [0, 0], [0.1, 0.3]), ControlVector([1, 0], [0.5, 0.2])
        assert stage_cost(x, q, small, cfg()) == pytest.approx(stage_cost(x, q, big, cfg()), rel=1e-15)

    def test_zero_horizon_cost(self, one_node):
        assert total_cost(np.zeros((2, 4)), np.zeros((1, 2)), one_node, cfg(terminal_weight=0.0)) == 0.0

    def test_terminal_penalises_infected_only(self, one_node):
        xh = np.array([0.7, 0.02, 0.03, 0.4])
        traj = np.vstack([np.zeros(4), xh])
        cost = total_cost(traj, np.zeros((1, 2)), one_node, cfg(rho=0.0))
        assert cost == pytest.approx(0.5 * (0.02 ** 2 + 0.03 ** 2), abs=1e-18)

    def test_hand_built_two_steps(self, two_node):
        # weights (0.3, 0.7), dt 7, rho 0.1, smoothing 2, terminal weight 1
        traj = np.array([
            [0.9, 0.9, 0.01, 0.02, 0.0, 0.01, 0.1, 0.2],
            [0.8, 0.85, 0.02, 0.01, 0.01, 0.0, 0.05, 0.1],
            [0.7, 0.8, 0.01, 0.01, 0.01, 0.02, 0.0, 0.3],
        ])
        controls = np.array([[1.0, 0.0, 0.5, 0.5], [1.5, 0.2, 0.0, 0.5]])
        c = cfg(rho=0.1, rho_smooth=2.0)
        burden = 7 * ((0.3 * 0.1 + 0.7 * 0.2) + (0.3 * 0.05 + 0.7 * 0.1))            # 7 * (0.17 + 0.085)
        effort = 7 * 0.05 * ((0.3 * (1 + 0.25) + 0.7 * (0 + 0.25)) + (0.3 * (2.25 + 0) + 0.7 * (0.04 + 0.25)))
        terminal = 0.5 * (0.01 ** 2 + 0.01 ** 2 + 0.01 ** 2 + 0.02 ** 2)
        smooth = 2.0 * (0.3 * 0.5 ** 2 + 0.7 * 0.2 ** 2)
        expected = burden + effort + terminal + smooth
        assert expected == pytest.approx(1.785 + 0.4998 + 0.00035 + 0.206, abs=1e-12)
        assert total_cost(traj, controls, two_node, c) == pytest.approx(expected, abs=1e-14)

    def test_smoothing_counts_only_increases(self):
        w = np.array([1.0])
        assert smoothing_penalty(np.array([[1.0, 1.0], [0.5, 0.5]]), w, 1.0) == 0.0
        assert smoothing_penalty(np.array([[1.0, 1.0]]), w, 1.0, applied_prev=[0.5, 1.5]) == pytest.approx(0.25)

    def test_length_contract(self, one_node):
        with pytest.raises(ContractError):
            total_cost(np.zeros((3, 4)), np.zeros((1, 2)), one_node, cfg())


class TestWarmStart:
    def test_shift_appends_q_safe(self, one_node):
        plan = np.arange(14, dtype=float).reshape(7, 2) / 10
        prev = MpcSolution(plan, np.zeros((8, 4)), 0.0, np.zeros(7), 0.0, True, "optimized")
        ws = warm_start(prev, EpiState([0.99], [0.01], [0], [0]), flat(), one_node, cfg())
        np.testing.assert_array_equal(ws[:-1], plan[1:])
        np.testing.assert_array_equal(ws[-1], [2.0, 2.0])

    def test_decaying_state_needs_no_isolation(self, one_node):
        s = 0.1
        assert lam_closed(one_node, s, [0, 0]) <= -0.023
        assert uniform_rate([s], BETA.as_array(), one_node, 0.023) == 0.0

    def test_uniform_root_matches_closed_form(self, one_node):
        r = uniform_rate([1.0], BETA.as_array(), one_node, 0.023)
        assert lam_closed(one_node, 1.0, [r, r]) == pytest.approx(-0.023, abs=1e-6)
        assert r == pytest.approx(0.169605 + 0.023, abs=1e-6)

    def test_cold_start_infeasible(self, one_node):
        with pytest.raises(ColdStartInfeasibleError):
            warm_start(None, EpiState([0.99], [0.01], [0], [0]), flat(), one_node, cfg(b_max=0.1))

    def test_repair_is_forward_min(self):
        c = cfg(rate_limit=0.2)
        plan = np.array([[1.0], [2.0], [0.1], [0.9]])
        np.testing.assert_allclose(repair_rate_limits(plan, np.array([0.5]), c), [[0.7], [0.9], [0.1], [0.3]])

    def test_ramp_meets_every_step(self, one_node):
        forecast = ForecastProfile([BETA] * 3 + [BETA.scaled(1.5)] * 4)
        c = cfg(rate_limit=0.2)
        ramp = ramp_start(EpiState([0.99], [0.01], [0], [0]), forecast, None, one_node, c)
        assert np.all(np.diff(ramp, axis=0) <= 0.2 + 1e-12)
        for j, b in enumerate(forecast.entries):
            assert lam_closed(one_node, 0.99, ramp[j], b) <= -0.023 + 1e-9


class TestMpcProblem:
    def make(self, net14, gradient="adjoint", rate=0.0):
        n = net14.n
        x = EpiState(np.full(n, 0.98), np.full(n, 0.005), np.full(n, 0.003), np.full(n, 0.002))
        beta_max = TransmissionRate(0.6, 0.9)
        model = net14.with_params(type(net14.params)(beta_max_a=0.6, beta_max_s=0.9))
        forecast = ForecastProfile([TransmissionRate(0.4, 0.6)] * 3 + [beta_max] * 4)
        c = cfg(rate_limit=rate, rho_smooth=0.5, solver=SolverConfig(gradient=gradient))
        return MpcProblem(x, forecast, np.full(2 * n, 0.5), model, c)

    def test_adjoint_gradient_matches_central_differences(self, net14):
        prob = self.make(net14)
        rng = np.random.default_rng(0)
        z = rng.uniform(0.2, 1.8, (7, 2 * net14.n))
        f, g = prob.objective(z, grad=True)
        c, jac = prob.constraints(z, grad=True)
        h = 1e-6
        for idx in [(0, 0), (2, 5), (6, 2 * net14.n - 1), (4, net14.n)]:
            e = np.zeros_like(z)
            e[idx] = h
            fd = (prob.objective(z + e) - prob.objective(z - e)) / (2 * h)
            assert g[idx] == pytest.approx(fd, rel=1e-5, abs=1e-9)
            fdc = (prob.constraints(z + e) - prob.constraints(z - e)) / (2 * h)
            np.testing.assert_allclose(jac[(slice(None),) + idx], fdc, rtol=1e-4, atol=1e-8)

    def test_fd_option_agrees_with_adjoint(self, net14):
        z = np.random.default_rng(1).uniform(0.2, 1.8, (7, 2 * net14.n))
        _, ga = self.make(net14).objective(z, grad=True)
        _, gf = self.make(net14, "fd").objective(z, grad=True)
        np.testing.assert_allclose(ga, gf, rtol=1e-4, atol=1e-8)
        _, ja = self.make(net14).constraints(z, grad=True)
        _, jf = self.make(net14, "fd").constraints(z, grad=True)
        np.testing.assert_allclose(ja, jf, rtol=1e-4, atol=1e-7)

    def test_projection_respects_rate(self, net14):
        prob = self.make(net14, rate=0.2)
        p = prob.project(np.full((7, 2 * net14.n), 2.0))
        np.testing.assert_allclose(p[0], 0.7)
        assert np.all(np.diff(p, axis=0) <= 0.2 + 1e-12)


class TestSolveMpc:
    def test_no_infection_no_isolation(self, node):
        x = EpiState([0.1], [0.0], [0.0], [0.0])
        sol = solve_mpc(x, flat(), None, None, node, cfg())
        assert sol.feasible
        np.testing.assert_allclose(sol.controls, 0.0, atol=1e-8)
        assert sol.cost == pytest.approx(0.0, abs=1e-12)

    def test_improves_on_q_safe(self, node):
        c = cfg()
        x = EpiState([0.6], [0.02], [0.01], [0.0])
        sol = solve_mpc(x, flat(), None, None, node, c)
        safe_cost = MpcProblem(x, flat(), None, node, c).assess(np.full((7, 2), 2.0))["cost"]
        assert sol.feasible
        assert sol.cost <= safe_cost
        assert sol.cost <= sol.warm_cost + 1e-12
        assert np.all(sol.margins >= -1e-9) and sol.terminal_margin >= -1e-9

    def test_solution_is_locally_optimal(self, node):
        c = cfg()
        x = EpiState([0.99], [0.01], [0.0], [0.0])
        sol = solve_mpc(x, flat(), None, None, node, c)
        prob = MpcProblem(x, flat(), None, node, c)
        rng = np.random.default_rng(2)
        for _ in range(30):
            z = prob.project(sol.controls + 1e-3 * rng.normal(size=sol.controls.shape))
            a = prob.assess(z)
            if a["feasible"]:
                assert a["cost"] >= sol.cost - 1e-7

    def test_shifted_candidate_feasible(self, node):
        c = cfg()
        x = EpiState([0.99], [0.01], [0.0], [0.0])
        sol = solve_mpc(x, flat(), None, None, node, c)
        x1 = EpiState.from_array(sol.predicted[1])
        check = check_shifted_candidate(sol, x1, flat(), node, c, sol.controls[0])
        assert check.feasible and check.box_ok

    def test_rate_limited_plan_respects_limits(self, node):
        c = cfg(rate_limit=0.2)
        x = EpiState([0.99], [0.01], [0.0], [0.0])
        sol = solve_mpc(x, flat(), None, np.array([0.1, 0.1]), node, c)
        assert sol.feasible
        assert np.all(sol.controls[0] <= 0.3 + 1e-12)
        assert np.all(np.diff(sol.controls, axis=0) <= 0.2 + 1e-12)


class TestMyopic:
    def test_decaying_state_returns_zero(self, node):
        dec = solve_myopic(EpiState([0.1], [0.01], [0], [0]), BETA, None, node, cfg())
        assert dec.feasible
        np.testing.assert_array_equal(dec.control.as_array(), [0.0, 0.0])

    def test_unreachable_returns_max_update(self, node):
        shock = BETA.scaled(2.0)
        assert uniform_rate([0.99], shock.as_array(), node, 0.023) > 0.25
        prev = np.array([0.0, 0.05])
        dec = solve_myopic(EpiState([0.99], [0.01], [0], [0]), shock, prev, node, cfg(rate_limit=0.2))
        assert not dec.feasible and dec.margin < 0
        np.testing.assert_allclose(dec.control.as_array(), [0.2, 0.25])

    def test_max_update_clipped_at_b(self, node):
        shock = BETA.scaled(2.0)
        prev = np.array([0.25, 0.25])
        dec = solve_myopic(EpiState([0.99], [0.01], [0], [0]), shock, prev, node, cfg(b_max=0.3, rate_limit=0.2))
        assert not dec.feasible
        np.testing.assert_allclose(dec.control.as_array(), [0.3, 0.3])

    def test_shock_without_rate_limit_is_feasible(self, node):
        shock = BETA.scaled(1.8)
        dec = solve_myopic(EpiState([0.99], [0.01], [0], [0]), shock, np.zeros(2), node, cfg())
        q = dec.control.as_array()
        assert dec.feasible and dec.margin >= 0
        assert -0.023 - lam_closed(node, 0.99, q, shock) >= -1e-12
        # no cheaper feasible point along the ray towards zero
        assert lam_closed(node, 0.99, 0.99 * q, shock) > -0.023
        r = uniform_rate([0.99], shock.as_array(), node, 0.023)
        assert np.sum(q ** 2) <= 2 * r ** 2 + 1e-9
