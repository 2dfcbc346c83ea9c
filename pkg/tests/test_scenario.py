import json
from pathlib import Path
from dataclasses import replace

import numpy as np
import pytest

from netmpc.errors import CalibrationError, ConfigError, ContractError
from netmpc.netmodel import EpiParams, validate_model
from netmpc.scenario import (
    InitialSpec,
    NetworkSpec,
    Scenario,
    TransmissionSpec,
    calibrate,
    compare,
    growth_rate,
    load_scenario,
    scenario_grid,
    prepare,
    run_closed_loop,
    scenario_from_dict,
    scenario_to_dict,
    seed_state,
    synth_network,
)

CONFIGS = sorted((Path(__file__).resolve().parents[1] / "configs").glob("*.json"))


class TestSynthNetwork:
    @pytest.mark.parametrize("n,seed", [(2, 0), (5, 1), (14, 2020), (40, 3)])
    def test_valid_model(self, n, seed):
        model = synth_network(n, seed)
        assert validate_model(model).ok
        assert model.n == n

    def test_two_nodes_fully_coupled(self):
        assert np.all(synth_network(2, 9).flow > 0)

    def test_deterministic_in_seed(self):
        a, b = synth_network(10, 42), synth_network(10, 42)
        np.testing.assert_array_equal(a.flow, b.flow)
        np.testing.assert_array_equal(a.populations, b.populations)
        assert not np.array_equal(a.flow, synth_network(10, 43).flow)

    def test_rejects_single_node(self):
        with pytest.raises(ContractError):
            synth_network(1, 0)


class TestCalibrate:
    @pytest.mark.parametrize("target", [0.05, 0.35, 1.2])
    def test_round_trip(self, net14, target):
        beta = calibrate(net14, target)
        assert growth_rate(net14, beta.as_array()) == pytest.approx(target, abs=1e-6)
        assert beta.beta_a == pytest.approx(0.67 * beta.beta_s, rel=1e-15)

    def test_small_target(self, net14):
        beta = calibrate(net14, 1e-9)
        assert abs(growth_rate(net14, beta.as_array())) < 1e-6

    def test_single_node_worked_example(self, one_node):
        beta = calibrate(one_node, 0.169605, ratio=0.3 / 0.45)
        assert beta.beta_s == pytest.approx(0.45, abs=1e-5)
        assert beta.beta_a == pytest.approx(0.3, abs=1e-5)

    def test_bad_inputs(self, net14):
        with pytest.raises(CalibrationError):
            calibrate(net14, 0.0)
        with pytest.raises(CalibrationError):
            calibrate(net14, 0.3, ratio=1.5)
        with pytest.raises(CalibrationError, match="unreachable"):
            calibrate(net14, 1e6, beta_s_max=10.0)


def test_seed_state_targets_largest_nodes(net14):
    x = seed_state(net14, 1e-3, 2)
    top = np.argsort(-net14.populations)[:2]
    assert set(np.flatnonzero(x.xa)) == set(top)
    np.testing.assert_allclose(x.s + x.xa, 1.0)
    x.validate()


class TestConfig:
    def test_defaults_resolve_substeps(self):
        sc = Scenario()
        assert sc.substeps == 18
        assert sc.step.substeps == 18 and sc.step.dt_sample == 7.0

    def test_policy_mode_sets_mpc_fields(self):
        assert Scenario(policy_mode="rate_limited").mpc.rate_limit == 0.2
        assert Scenario(policy_mode="smoothing").mpc.rho_smooth == 1.0
        pure = Scenario().mpc
        assert pure.rate_limit == 0.0 and pure.rho_smooth == 0.0

    def test_round_trip(self):
        sc = Scenario(name="x", policy_mode="smoothing", duration_weeks=9)
        again = scenario_from_dict(json.loads(json.dumps(scenario_to_dict(sc))))
        assert again == sc

    @pytest.mark.parametrize("data,match", [
        ({"nme": "typo"}, "unknown"),
        ({"network": {"n": 5, "sede": 1}}, "network"),
        ({"mpc": {"horizon": 7, "alfa": 0.1}}, "mpc"),
        ({"controller": "pid"}, "controller"),
        ({"duration_weeks": 0}, "duration_weeks"),
        ({"network": [1, 2]}, "expected an object"),
    ])
    def test_strict_loader(self, data, match):
        with pytest.raises(ConfigError, match=match):
            scenario_from_dict(data)

    def test_malformed_json(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text('{"name": "x",')
        with pytest.raises(ConfigError, match="line 1"):
            load_scenario(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_scenario(tmp_path / "absent.json")

    @pytest.mark.parametrize("path", CONFIGS, ids=lambda p: p.stem)
    def test_shipped_configs_load(self, path):
        sc = load_scenario(path)
        assert sc.name == path.stem

    def test_relative_csv_paths(self, tmp_path, two_node):
        from netmpc.netmodel import write_network
        write_network(two_node, tmp_path / "pops.csv", tmp_path / "flow.csv")
        cfg = {"network": {"populations_csv": "pops.csv", "flow_csv": "flow.csv"}, "duration_weeks": 4}
        (tmp_path / "sc.json").write_text(json.dumps(cfg))
        prep = prepare(load_scenario(tmp_path / "sc.json"))
        np.testing.assert_array_equal(prep.model.populations, two_node.populations)


class TestPrepare:
    def test_shock_schedule(self):
        prep = prepare(Scenario(duration_weeks=8))
        base = prep.base_beta.as_array()
        np.testing.assert_allclose(prep.schedule[:4], np.tile(base, (4, 1)))
        np.testing.assert_allclose(prep.schedule[4:], np.tile(1.8 * base, (5, 1)))
        assert prep.terminal.beta_max.beta_s == pytest.approx(1.8 * base[1])
        assert growth_rate(prep.model, base) == pytest.approx(0.35, abs=1e-6)

    def test_forecast_modes(self):
        perfect = prepare(Scenario(duration_weeks=8))
        persist = prepare(Scenario(duration_weeks=8, forecast_mode="persistence"))
        f = perfect.forecast(2).as_array()
        np.testing.assert_array_equal(f[2], perfect.schedule[4])
        np.testing.assert_array_equal(persist.forecast(2).as_array(), np.tile(persist.schedule[2], (7, 1)))

    def test_explicit_schedule_padded(self):
        sc = Scenario(duration_weeks=4, transmission=TransmissionSpec(schedule=((0.2, 0.3), (0.25, 0.35))))
        prep = prepare(sc)
        assert prep.schedule.shape == (5, 2)
        np.testing.assert_array_equal(prep.schedule[-1], [0.25, 0.35])

    def test_explicit_initial_state(self):
        n = 3
        state = {"s": [0.99] * n, "xa": [0.01] * n, "xs": [0.0] * n, "k": [0.0] * n}
        sc = Scenario(duration_weeks=4, network=NetworkSpec(n=n), initial=InitialSpec(state=state))
        np.testing.assert_array_equal(prepare(sc).initial.xa, [0.01] * n)
        bad = replace(sc, initial=InitialSpec(state={**state, "s": [0.999] * n}))
        with pytest.raises(ContractError):
            prepare(bad)


def small(controller, policy="pure", weeks=5):
    return Scenario(name=f"{policy}-{controller}", controller=controller, policy_mode=policy,
                    duration_weeks=weeks, network=NetworkSpec(n=4, seed=3), epi=EpiParams(),
                    transmission=TransmissionSpec(shock_day=14.0))


@pytest.fixture(scope="module")
def runs():
    return {c: run_closed_loop(small(c)) for c in ("mpc", "myopic")}


class TestClosedLoop:
    def test_record_shapes(self, runs):
        rec = runs["myopic"]
        assert rec.state_array.shape == (6, 16)
        assert rec.control_array.shape == (6, 8)
        np.testing.assert_array_equal(rec.times, 7.0 * np.arange(6))
        assert len(rec.status) == 6

    def test_susceptibles_monotone(self, runs):
        for rec in runs.values():
            assert np.all(np.diff(rec.state_array[:, :4], axis=0) <= 0)

    def test_controls_in_box(self, runs):
        for rec in runs.values():
            assert rec.control_array.min() >= 0 and rec.control_array.max() <= 2.0

    def test_mpc_certificate_valid(self, runs):
        rec = runs["mpc"]
        assert rec.certificate.valid
        assert rec.metrics["violation_count"] == 0
        assert rec.continuation is not None

    def test_margins_consistent(self, runs):
        for rec in runs.values():
            np.testing.assert_allclose(rec.margins, -0.023 - rec.lambdas, rtol=0, atol=0)

    def test_burden_integral(self, runs):
        rec = runs["myopic"]
        k = rec.state_array[:, 12:] @ rec.weights
        assert rec.burden_cumulative[-1] == pytest.approx(np.trapezoid(k, rec.times), rel=1e-12)


class TestCompare:
    def test_identical_records(self):
        rec = run_closed_loop(small("myopic", weeks=3))
        report = compare([rec, rec])
        assert [row["relative_burden"] for row in report.rows] == [1.0, 1.0]
        assert report.rows[0]["cumulative_burden"] == report.rows[1]["cumulative_burden"]
        assert report.to_csv().splitlines()[0].startswith("name,controller")

    def test_mismatched_grid(self):
        a = run_closed_loop(small("myopic", weeks=2))
        b = run_closed_loop(small("myopic", weeks=3))
        with pytest.raises(ContractError, match="duration"):
            compare([a, b])

    def test_empty(self):
        with pytest.raises(ContractError):
            compare([])


class TestScenarioGrid:
    def test_grid_names(self):
        names = [sc.name for sc in scenario_grid()]
        assert len(names) == 6 and len(set(names)) == 6
        assert "rate_limited-mpc" in names

    def test_pure_mpc_valid(self, grid_runs):
        assert grid_runs["records"]["pure-mpc"].certificate.valid

    def test_rate_limited_myopic_violates_after_shock(self, grid_runs):
        rec = grid_runs["records"]["rate_limited-myopic"]
        shock_week = 4
        assert rec.margins[shock_week:].min() < 0
        assert not rec.certificate.valid

    def test_rate_limited_mpc_lower_burden(self, grid_runs):
        recs = grid_runs["records"]
        assert (recs["rate_limited-mpc"].metrics["cumulative_burden"]
                < recs["rate_limited-myopic"].metrics["cumulative_burden"])
