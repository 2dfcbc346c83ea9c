"""Scenario definitions, synthetic networks, calibration and closed-loop simulation."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .certify import (
    DecayCertificate,
    TerminalConfig,
    build_continuation,
    certify_arrays,
)
from .control import (
    MpcConfig,
    SolverConfig,
    check_shifted_candidate,
    solve_mpc,
    solve_myopic,
)
from .errors import (
    CalibrationError,
    ColdStartInfeasibleError,
    ConfigError,
    ContractError,
    InfeasibleError,
)
from .integrator import StepConfig, positivity_substeps, rk4_interval
from .netmodel import (
    ControlVector,
    EpiParams,
    EpiState,
    ForecastProfile,
    NetworkModel,
    TransmissionRate,
    load_network,
)
from .spectral import infected_matrix_array, spectral_abscissa

log = logging.getLogger(__name__)

CONTROLLERS = ("mpc", "myopic")
POLICY_MODES = ("pure", "smoothing", "rate_limited")
FORECAST_MODES = ("perfect", "persistence")


# --------------------------------------------------------------------------
# network generation and calibration


def synth_network(n: int, seed: int, params: EpiParams = EpiParams(), extra_edge_prob: float = 0.15) -> NetworkModel:
    """Random commuter network: dominant intra-node contact plus a bidirectional ring and sparse extra links."""
    if n < 2:
        raise ContractError("synthetic networks need n >= 2")
    rng = np.random.default_rng(seed)
    pops = np.round(np.exp(rng.uniform(np.log(5e4), np.log(8e5), size=n)))
    flow = np.zeros((n, n))
    flow[np.diag_indices(n)] = rng.uniform(0.8, 1.2, size=n)
    for i in range(n):
        j = (i + 1) % n
        flow[i, j] = rng.uniform(0.01, 0.08)
        flow[j, i] = rng.uniform(0.01, 0.08)
    extra = (rng.random((n, n)) < extra_edge_prob) & (flow == 0)
    flow[extra] = rng.uniform(0.01, 0.08, size=int(extra.sum()))
    return NetworkModel(pops, flow, params)


def growth_rate(model: NetworkModel, beta) -> float:
    """Uncontrolled growth rate ``lambda_max(M(1, 0 | beta))`` of a fully susceptible network."""
    n = model.n
    m = infected_matrix_array(np.ones(n), np.zeros(2 * n), np.asarray(beta, float), model.flow, model.params)
    return spectral_abscissa(m, vectors=False).lambda_max


def calibrate(model: NetworkModel, growth_target: float, ratio: float = 0.67,
              beta_s_max: float = 1e3) -> TransmissionRate:
    """Bisection on ``beta_s`` (with ``beta_a = ratio * beta_s``) to hit a growth rate."""
    if not growth_target > 0:
        raise CalibrationError("growth target must be > 0")
    if not 0 < ratio <= 1:
        raise CalibrationError("ratio must lie in (0, 1]")

    def g(bs):
        return growth_rate(model, (ratio * bs, bs)) - growth_target

    lo, hi = 0.0, 1.0
    while g(hi) < 0:
        lo, hi = hi, 2 * hi
        if hi > beta_s_max:
            raise CalibrationError(f"growth target {growth_target} unreachable for beta_s <= {beta_s_max}")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if g(mid) < 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * hi:
            break
    bs = 0.5 * (lo + hi)
    return TransmissionRate(ratio * bs, bs)


def seed_state(model: NetworkModel, prevalence: float = 1e-3, nodes: int = 2) -> EpiState:
    """Asymptomatic seed of ``prevalence`` in the ``nodes`` most populous nodes."""
    n = model.n
    xa = np.zeros(n)
    xa[np.argsort(-model.populations, kind="stable")[:min(nodes, n)]] = prevalence
    return EpiState(1.0 - xa, xa, np.zeros(n), np.zeros(n))


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class NetworkSpec:
    n: int = 14
    seed: int = 2020
    populations_csv: Optional[str] = None
    flow_csv: Optional[str] = None


@dataclass(frozen=True)
class TransmissionSpec:
    growth_target: Optional[float] = 0.35
    ratio: float = 0.67
    beta_a: Optional[float] = None
    beta_s: Optional[float] = None
    shock_day: float = 28.0
    shock_multiplier: float = 1.8
    schedule: Optional[tuple] = None


@dataclass(frozen=True)
class InitialSpec:
    prevalence: float = 1e-3
    nodes: int = 2
    state: Optional[dict] = None


@dataclass(frozen=True)
class Scenario:
    name: str = "scenario"
    controller: str = "mpc"
    policy_mode: str = "pure"
    forecast_mode: str = "perfect"
    duration_weeks: int = 20
    dt_days: float = 7.0
    substeps: Optional[int] = None
    smoothing_weight: float = 1.0
    rate_limit: float = 0.2
    network: NetworkSpec = field(default_factory=NetworkSpec)
    epi: EpiParams = field(default_factory=EpiParams)
    transmission: TransmissionSpec = field(default_factory=TransmissionSpec)
    initial: InitialSpec = field(default_factory=InitialSpec)
    mpc: MpcConfig = field(default_factory=MpcConfig)

    def __post_init__(self):
        if self.controller not in CONTROLLERS:
            raise ConfigError(f"controller must be one of {CONTROLLERS}")
        if self.policy_mode not in POLICY_MODES:
            raise ConfigError(f"policy_mode must be one of {POLICY_MODES}")
        if self.forecast_mode not in FORECAST_MODES:
            raise ConfigError(f"forecast_mode must be one of {FORECAST_MODES}")
        if int(self.duration_weeks) != self.duration_weeks or self.duration_weeks < 1:
            raise ConfigError("duration_weeks must be an integer >= 1")
        tr = self.transmission
        if not tr.shock_multiplier > 0:
            raise ConfigError("shock_multiplier must be > 0")
        if tr.schedule is None and not 0 <= tr.shock_day <= self.duration_weeks * self.dt_days:
            raise ConfigError("shock_day must fall within the run")
        if self.substeps is None:
            object.__setattr__(self, "substeps", positivity_substeps(self.dt_days, self.epi, self.mpc.b_max))
        step = StepConfig(self.dt_days, self.substeps)
        rho_smooth = self.smoothing_weight if self.policy_mode == "smoothing" else 0.0
        rate = self.rate_limit if self.policy_mode == "rate_limited" else 0.0
        object.__setattr__(self, "mpc", replace(self.mpc, step=step, rho_smooth=rho_smooth, rate_limit=rate))

    @property
    def step(self) -> StepConfig:
        return self.mpc.step

    def with_seed(self, seed: int) -> "Scenario":
        return replace(self, network=replace(self.network, seed=int(seed)))

    def with_substeps(self, substeps: int) -> "Scenario":
        return replace(self, substeps=int(substeps))


_SECTIONS = {
    "network": NetworkSpec,
    "epi": EpiParams,
    "transmission": TransmissionSpec,
    "initial": InitialSpec,
    "mpc": MpcConfig,
    "solver": SolverConfig,
}
_EXCLUDED = {Scenario: {"mpc"}, MpcConfig: {"step", "rho_smooth", "rate_limit", "solver"}}


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    names = {f.name for f in fields(cls)} - _EXCLUDED.get(cls, set())
    nested = {"mpc", "solver"} & set(data) if cls in (Scenario, MpcConfig) else set()
    unknown = set(data) - names - nested
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown key(s) {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        where = f"{path}.{key}" if path else key
        if key in _SECTIONS:
            kwargs[key] = _build(_SECTIONS[key], value, where)
        elif isinstance(value, list):
            kwargs[key] = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ContractError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def scenario_from_dict(data: dict) -> Scenario:
    return _build(Scenario, data, "")


def load_scenario(path) -> Scenario:
    """Parse a JSON scenario file; unknown keys and malformed JSON raise :class:`ConfigError`."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    scenario = scenario_from_dict(data)
    net = scenario.network
    base = path.parent
    if net.populations_csv is not None:
        net = replace(net, populations_csv=str(base / net.populations_csv))
    if net.flow_csv is not None:
        net = replace(net, flow_csv=str(base / net.flow_csv))
    return replace(scenario, network=net)


def _plain(obj):
    if is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def scenario_to_dict(scenario: Scenario) -> dict:
    """Round-trippable dictionary (derived MPC fields are dropped)."""
    d = _plain(scenario)
    for key in ("step", "rho_smooth", "rate_limit"):
        d["mpc"].pop(key)
    return d


# --------------------------------------------------------------------------
# prepared scenario


@dataclass(frozen=True, eq=False)
class Prepared:
    """Scenario resolved against a concrete network: schedule, terminal data, initial state."""

    scenario: Scenario
    model: NetworkModel
    base_beta: TransmissionRate
    schedule: np.ndarray            # (duration_weeks + 1, 2), one row per sampling instant
    terminal: TerminalConfig
    initial: EpiState

    def beta_at(self, m: int) -> np.ndarray:
        """Transmission over interval ``m``; held at its last value past the run."""
        return self.schedule[min(m, self.schedule.shape[0] - 1)]

    def forecast(self, m: int) -> ForecastProfile:
        horizon = self.scenario.mpc.horizon
        if self.scenario.forecast_mode == "persistence":
            rows = [self.beta_at(m)] * horizon
        else:
            rows = [self.beta_at(m + j) for j in range(horizon)]
        return ForecastProfile(tuple(TransmissionRate(*map(float, b)) for b in rows))


def build_model(scenario: Scenario, model: Optional[NetworkModel] = None) -> NetworkModel:
    if model is not None:
        return model.with_params(scenario.epi)
    net = scenario.network
    if (net.populations_csv is None) != (net.flow_csv is None):
        raise ConfigError("network: populations_csv and flow_csv must be given together")
    if net.populations_csv is not None:
        return load_network(net.populations_csv, net.flow_csv, scenario.epi)
    return synth_network(net.n, net.seed, scenario.epi)


def prepare(scenario: Scenario, model: Optional[NetworkModel] = None) -> Prepared:
    """Resolve network, baseline transmission, shock schedule and ``beta_max``.

    The largest scheduled transmission is folded into ``beta_max`` so the
    plant never exceeds the worst case assumed by the terminal set.
    """
    model = build_model(scenario, model)
    tr = scenario.transmission
    weeks = scenario.duration_weeks
    if tr.schedule is not None:
        schedule = np.array(tr.schedule, dtype=float)
        if schedule.ndim != 2 or schedule.shape[1] != 2 or schedule.shape[0] < 1:
            raise ConfigError("transmission.schedule must be a list of [beta_a, beta_s] pairs")
        if schedule.shape[0] < weeks + 1:
            schedule = np.vstack([schedule, np.repeat(schedule[-1:], weeks + 1 - schedule.shape[0], axis=0)])
        base = TransmissionRate(*schedule[0])
    else:
        if tr.beta_a is not None and tr.beta_s is not None:
            base = TransmissionRate(float(tr.beta_a), float(tr.beta_s))
        elif tr.growth_target is not None:
            base = calibrate(model, tr.growth_target, tr.ratio)
        else:
            raise ConfigError("transmission: give beta_a and beta_s, a growth_target, or a schedule")
        times = scenario.dt_days * np.arange(weeks + 1)
        mult = np.where(times >= tr.shock_day, tr.shock_multiplier, 1.0)
        schedule = base.as_array()[None, :] * mult[:, None]
    if np.any(~np.isfinite(schedule)) or np.any(schedule <= 0):
        raise ConfigError("transmission rates must be finite and > 0")
    bmax = schedule.max(axis=0)
    params = replace(scenario.epi, beta_max_a=float(bmax[0]), beta_max_s=float(bmax[1]))
    model = model.with_params(params)
    terminal = TerminalConfig(scenario.mpc.alpha, scenario.mpc.b_max, TransmissionRate(*map(float, bmax)))
    init = scenario.initial
    if init.state is not None:
        try:
            x0 = EpiState(**{k: np.asarray(v, float) for k, v in init.state.items()})
        except TypeError as exc:
            raise ConfigError(f"initial.state: {exc}") from None
        if x0.n != model.n:
            raise ConfigError("initial.state dimension differs from the network")
        x0.validate()
    else:
        x0 = seed_state(model, init.prevalence, init.nodes)
    return Prepared(scenario, model, base, schedule, terminal, x0)


# --------------------------------------------------------------------------
# closed loop


@dataclass(eq=False)
class RunRecord:
    """Closed-loop history; row ``m`` holds the state measured at ``t_m`` and the input decided there.

    The input of the final row is decided but not applied (the run ends).
    """

    name: str
    controller: str
    policy_mode: str
    times: np.ndarray
    state_array: np.ndarray
    control_array: np.ndarray
    beta_array: np.ndarray
    lambdas: np.ndarray
    margins: np.ndarray
    status: list
    candidate_checks: list
    populations: np.ndarray
    weights: np.ndarray
    certificate: Optional[DecayCertificate] = None
    continuation: Optional[dict] = None
    metrics: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.populations.shape[0]

    @property
    def states(self) -> list[EpiState]:
        return [EpiState.from_array(x) for x in self.state_array]

    @property
    def applied_controls(self) -> list[ControlVector]:
        return [ControlVector.from_array(q) for q in self.control_array]

    @property
    def applied_betas(self) -> list[TransmissionRate]:
        return [TransmissionRate(*map(float, b)) for b in self.beta_array]

    @property
    def y_norm(self) -> np.ndarray:
        n = self.n
        return self.state_array[:, n:3 * n].sum(axis=1)

    @property
    def prevalence_persons(self) -> np.ndarray:
        n = self.n
        x = self.state_array
        return (x[:, n:2 * n] + x[:, 2 * n:3 * n]) @ self.populations

    @property
    def burden_cumulative(self) -> np.ndarray:
        k = self.state_array[:, 3 * self.n:] @ self.weights
        steps = np.diff(self.times) * 0.5 * (k[1:] + k[:-1])
        return np.concatenate([[0.0], np.cumsum(steps)])


def compute_metrics(record: RunRecord) -> dict:
    margins = record.margins
    cert = record.certificate
    return {
        "peak_prevalence": float(record.prevalence_persons.max()),
        "peak_week": int(np.argmax(record.prevalence_persons)),
        "cumulative_burden": float(record.burden_cumulative[-1]),
        "certificate_valid": bool(cert.valid) if cert is not None else None,
        "violation_count": int(np.sum(margins < -1e-9)),
        "min_margin": float(margins.min()),
        "final_y_norm": float(record.y_norm[-1]),
        "fallback_steps": int(sum(s == "warm-start-fallback" for s in record.status)),
        "infeasible_steps": int(sum(s in ("infeasible", "myopic-violated") for s in record.status)),
        "candidate_failures": int(sum(c is False for c in record.candidate_checks)),
    }


def run_closed_loop(scenario: Scenario, model: Optional[NetworkModel] = None,
                    prepared: Optional[Prepared] = None) -> RunRecord:
    """Measure, forecast, decide, apply the first action; repeat for the whole run."""
    prep = prepared or prepare(scenario, model)
    model, cfg = prep.model, scenario.mpc
    step = scenario.step
    weeks = scenario.duration_weeks
    n = model.n
    x = prep.initial.as_array()
    states = np.empty((weeks + 1, 4 * n))
    controls = np.empty((weeks + 1, 2 * n))
    lambdas = np.empty(weeks + 1)
    status, checks = [], []
    prev_sol, applied_prev = None, None
    first_solution = None
    for m in range(weeks + 1):
        state = EpiState.from_array(x)
        beta = prep.beta_at(m)
        check = None
        if scenario.controller == "mpc":
            forecast = prep.forecast(m)
            if prev_sol is not None and scenario.forecast_mode == "perfect":
                check = check_shifted_candidate(prev_sol, state, forecast, model, cfg, applied_prev).feasible
            try:
                sol = solve_mpc(state, forecast, prev_sol, applied_prev, model, cfg)
            except ColdStartInfeasibleError:
                raise
            except InfeasibleError as exc:
                if m == 0:
                    raise ColdStartInfeasibleError(str(exc), exc.best_effort) from None
                log.warning("%s: step %d infeasible, applying best effort", scenario.name, m)
                q = exc.best_effort.control.as_array()
                prev_sol, tag = None, "infeasible"
            else:
                q = sol.controls[0]
                prev_sol, tag = sol, sol.provenance
                if first_solution is None:
                    first_solution = sol
        else:
            dec = solve_myopic(state, TransmissionRate(*map(float, beta)), applied_prev, model, cfg)
            q = dec.control.as_array()
            tag = "myopic" if dec.feasible else "myopic-violated"
        states[m], controls[m] = x, q
        mat = infected_matrix_array(x[:n], q, beta, model.flow, model.params)
        lambdas[m] = spectral_abscissa(mat, vectors=False).lambda_max
        status.append(tag)
        checks.append(check)
        if m < weeks:
            x = rk4_interval(x, q, beta, model, step.dt_sample, step.substeps)
        applied_prev = q
    times = step.dt_sample * np.arange(weeks + 1)
    betas = prep.schedule[:weeks + 1].copy()
    record = RunRecord(scenario.name, scenario.controller, scenario.policy_mode, times, states,
                       controls, betas, lambdas, -cfg.alpha - lambdas, status, checks,
                       model.populations, model.weights)
    record.certificate = certify_arrays(times, states, controls, betas, model, prep.terminal)
    if first_solution is not None:
        cont = build_continuation(prep.initial, first_solution, model, prep.terminal, two_phase=True)
        record.continuation = cont.to_dict()
    record.metrics = compute_metrics(record)
    return record


# --------------------------------------------------------------------------
# comparison


@dataclass(frozen=True)
class ComparisonReport:
    rows: tuple

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(self.rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow({k: (format(v, ".17g") if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"runs": list(self.rows)}


def compare(records) -> ComparisonReport:
    """One row per run; relative burden is measured against the first record."""
    records = list(records)
    if not records:
        raise ContractError("nothing to compare")
    ref = records[0]
    for r in records[1:]:
        if r.times.shape != ref.times.shape or not np.array_equal(r.times, ref.times):
            raise ContractError(f"run {r.name!r} has a different duration or sampling grid")
        if r.n != ref.n or not np.array_equal(r.populations, ref.populations):
            raise ContractError(f"run {r.name!r} uses a different network")
    ref_burden = ref.metrics["cumulative_burden"]
    rows = []
    for r in records:
        met = r.metrics
        rel = met["cumulative_burden"] / ref_burden if ref_burden > 0 else (1.0 if met["cumulative_burden"] == 0 else math.inf)
        rows.append({
            "name": r.name,
            "controller": r.controller,
            "policy_mode": r.policy_mode,
            "peak_prevalence": met["peak_prevalence"],
            "cumulative_burden": met["cumulative_burden"],
            "relative_burden": rel,
            "certificate_valid": met["certificate_valid"],
            "violation_count": met["violation_count"],
        })
    return ComparisonReport(tuple(rows))


def scenario_grid(base: Scenario = Scenario()) -> list[Scenario]:
    """Three policy regimes times two controllers, all with the day-28 shock."""
    return [
        replace(base, name=f"{policy}-{controller}", policy_mode=policy, controller=controller)
        for policy in POLICY_MODES
        for controller in CONTROLLERS
    ]
