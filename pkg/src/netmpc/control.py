"""Receding-horizon and myopic isolation controllers under the spectral decay constraint.

The MPC decision variable is a plan ``Z`` of shape ``(H, 2n)`` (row ``j`` is
``[qa_j, qs_j]``). Constraints are

* ``lambda_max(M(s_j, q_j | beta_j)) <= -alpha`` at every prediction step,
* ``lambda_max(M(s_H, q_safe | beta_max)) <= -alpha`` (terminal set),
* box ``[0, B]`` and optional one-sided rate limits (handled by projection).

Gradients: the rollout-dependent parts (isolation burden, terminal cost and
the predicted susceptibles) are differentiated by the discrete adjoint of the
RK4 map, or optionally by batched central finite differences. The Perron root
derivative ``v u^T / v^T u`` supplies the sensitivity of each spectral
constraint to its matrix, which is chained through the susceptibles.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .certify import TerminalConfig, q_safe_array, terminal_margin_array
from .errors import ColdStartInfeasibleError, ContractError, InfeasibleError
from .integrator import StepConfig, pullback, rollout_array, rollout_with_stages
from .netmodel import ControlVector, EpiState, ForecastProfile, NetworkModel, TransmissionRate
from .nlp import augmented_lagrangian, project_rate_box, rate_box_violation
from .spectral import infected_matrix_array, irreducible_hint, spectral_abscissa

log = logging.getLogger(__name__)

MARGIN_TOL = 1e-9


@dataclass(frozen=True)
class SolverConfig:
    max_outer: int = 12
    max_inner: int = 60
    fd_step: float = 1e-6
    penalty_init: float = 100.0
    penalty_growth: float = 10.0
    tol: float = 1e-6
    feas_margin: float = 1e-6
    gradient: str = "adjoint"

    def __post_init__(self):
        if self.gradient not in ("adjoint", "fd"):
            raise ContractError("SolverConfig.gradient must be 'adjoint' or 'fd'")
        for name in ("max_outer", "max_inner", "fd_step", "penalty_init", "tol", "feas_margin"):
            if not getattr(self, name) > 0:
                raise ContractError(f"SolverConfig.{name} must be > 0")
        if not self.penalty_growth > 1:
            raise ContractError("SolverConfig.penalty_growth must be > 1")


@dataclass(frozen=True)
class MpcConfig:
    horizon: int = 7
    alpha: float = 0.023
    rho: float = 0.1
    b_max: float = 2.0
    terminal_cost_diag: Optional[tuple] = None
    terminal_weight: float = 1.0
    rho_smooth: float = 0.0
    rate_limit: float = 0.0
    step: StepConfig = field(default_factory=StepConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if int(self.horizon) != self.horizon or self.horizon < 1:
            raise ContractError("horizon must be an integer >= 1")
        if not self.alpha > 0 or not self.b_max > 0:
            raise ContractError("alpha and b_max must be > 0")
        for name in ("rho", "rho_smooth", "rate_limit", "terminal_weight"):
            if getattr(self, name) < 0:
                raise ContractError(f"MpcConfig.{name} must be >= 0")
        if self.terminal_cost_diag is not None:
            diag = tuple(float(v) for v in self.terminal_cost_diag)
            if min(diag) < 0:
                raise ContractError("terminal_cost_diag must be >= 0")
            object.__setattr__(self, "terminal_cost_diag", diag)

    def terminal_diag(self, n: int) -> np.ndarray:
        if self.terminal_cost_diag is not None:
            diag = np.asarray(self.terminal_cost_diag, dtype=float)
            if diag.shape != (4 * n,):
                raise ContractError(f"terminal_cost_diag must have length {4 * n}")
            return diag
        w = self.terminal_weight
        return np.concatenate([np.zeros(n), np.full(2 * n, w), np.zeros(n)])

    def terminal(self, model: NetworkModel) -> TerminalConfig:
        return TerminalConfig(self.alpha, self.b_max, model.params.beta_max)


@dataclass(eq=False)
class MpcSolution:
    controls: np.ndarray           # (H, 2n)
    predicted: np.ndarray          # (H + 1, 4n)
    cost: float
    margins: np.ndarray            # (H,) values -alpha - lambda_max(M_j)
    terminal_margin: float
    feasible: bool
    provenance: str                # "optimized" | "warm-start-fallback"
    warm_cost: float = np.nan
    multipliers: Optional[np.ndarray] = None
    betas: Optional[np.ndarray] = None
    iterations: int = 0

    @property
    def horizon(self) -> int:
        return self.controls.shape[0]

    def control(self, j: int = 0) -> ControlVector:
        return ControlVector.from_array(self.controls[j])

    def predicted_state(self, j: int) -> EpiState:
        return EpiState.from_array(self.predicted[j])


@dataclass(frozen=True)
class MyopicDecision:
    control: ControlVector
    feasible: bool
    margin: float


@dataclass(frozen=True)
class CandidateCheck:
    """Feasibility of the shifted previous plan at the next sampling instant."""

    feasible: bool
    margins: np.ndarray
    terminal_margin: float
    box_ok: bool
    rate_ok: bool


# --------------------------------------------------------------------------
# costs


def stage_cost(state: EpiState, control: ControlVector, model: NetworkModel, cfg: MpcConfig) -> float:
    """Population-weighted isolation plus quadratic effort, per day."""
    w = model.weights
    return float(w @ state.k + 0.5 * cfg.rho * (w @ (control.qa ** 2 + control.qs ** 2)))


def smoothing_penalty(controls, weights, rho_smooth: float, applied_prev=None) -> float:
    """``rho_smooth * sum_j sum_i w_i max(0, q_ij - q_i,j-1)^2`` over both control channels."""
    if rho_smooth == 0:
        return 0.0
    q = np.asarray(controls, dtype=float)
    w2 = np.concatenate([weights, weights])
    if applied_prev is not None:
        q = np.vstack([np.asarray(applied_prev, dtype=float)[None, :], q])
    if q.shape[0] < 2:
        return 0.0
    inc = np.maximum(0.0, np.diff(q, axis=0))
    return float(rho_smooth * np.sum(inc ** 2 * w2))


def _as_state_array(trajectory) -> np.ndarray:
    if isinstance(trajectory, np.ndarray):
        return trajectory
    return np.array([x.as_array() if isinstance(x, EpiState) else x for x in trajectory])


def _as_control_array(controls) -> np.ndarray:
    if isinstance(controls, np.ndarray):
        return controls.reshape(len(controls), -1)
    return np.array([q.as_array() if isinstance(q, ControlVector) else q for q in controls])


def total_cost(trajectory, controls, model: NetworkModel, cfg: MpcConfig, applied_prev=None) -> float:
    """Discretised horizon cost: stage costs times dt, terminal quadratic, smoothing term."""
    xs = _as_state_array(trajectory)
    qs = _as_control_array(controls)
    if xs.shape[0] != qs.shape[0] + 1:
        raise ContractError(f"{xs.shape[0]} states for {qs.shape[0]} controls")
    n = model.n
    w = model.weights
    dt = cfg.step.dt_sample
    k = xs[:-1, 3 * n:]
    effort = 0.5 * cfg.rho * np.sum((qs[:, :n] ** 2 + qs[:, n:] ** 2) * w)
    stage = float(np.sum(k * w) + effort) * dt
    xh = xs[-1]
    terminal = 0.5 * float(xh @ (cfg.terminal_diag(n) * xh))
    return stage + terminal + smoothing_penalty(qs, w, cfg.rho_smooth, applied_prev)


# --------------------------------------------------------------------------
# warm starts


def _abscissa_at(s, q, beta, model, hint=None):
    m = infected_matrix_array(s, q, beta, model.flow, model.params)
    return spectral_abscissa(m, irreducible=hint, vectors=False).lambda_max


def uniform_rate(s, beta, model: NetworkModel, alpha: float) -> float:
    """Smallest ``r >= 0`` with ``lambda_max(M(s, r*1 | beta)) <= -alpha``.

    A uniform isolation rate shifts the whole diagonal, ``M(s, r*1) = M(s, 0) - r I``,
    so the root is available in closed form.
    """
    lam0 = _abscissa_at(s, np.zeros(2 * model.n), beta, model)
    return max(0.0, lam0 + alpha)


def warm_start(prev: Optional[MpcSolution], current_state: EpiState, forecast: ForecastProfile,
               model: NetworkModel, cfg: MpcConfig) -> np.ndarray:
    """Initial plan ``(H, 2n)``: shifted previous plan plus ``q_safe``, or a uniform cold start."""
    n, horizon = model.n, cfg.horizon
    if prev is not None:
        if prev.horizon != horizon:
            raise ContractError("previous solution horizon differs from config")
        q_safe = q_safe_array(n, cfg.b_max)
        return np.vstack([prev.controls[1:], q_safe[None, :]])
    rate = uniform_rate(current_state.s, forecast[0].as_array(), model, cfg.alpha)
    if rate > cfg.b_max:
        inside, margin = terminal_margin_array(current_state.s, model, cfg.terminal(model))
        if not inside:
            raise ColdStartInfeasibleError(
                f"no uniform isolation rate in [0, {cfg.b_max}] meets the decay target "
                f"(needs {rate:.4f}); state outside the terminal set (margin {margin:.4g})"
            )
        rate = cfg.b_max
    return np.full((horizon, 2 * n), rate)


def ramp_start(current_state: EpiState, forecast: ForecastProfile, applied_prev,
               model: NetworkModel, cfg: MpcConfig) -> Optional[np.ndarray]:
    """Uniform-rate plan meeting every forecast step at the *current* susceptibles.

    Susceptibles only decrease along any trajectory, so a rate that works at
    ``s(t_m)`` works at every predicted ``s_j``. Rates are then raised backwards
    in time to respect the rate limit. Returns ``None`` when the box or the
    first-step rate limit makes this construction impossible.
    """
    s = current_state.s
    need = np.array([uniform_rate(s, b.as_array(), model, cfg.alpha) for b in forecast.entries])
    if cfg.rate_limit > 0:
        for j in range(len(need) - 2, -1, -1):
            need[j] = max(need[j], need[j + 1] - cfg.rate_limit)
        if applied_prev is not None and np.any(need[0] > np.asarray(applied_prev) + cfg.rate_limit + 1e-15):
            return None
    if need.max() > cfg.b_max:
        return None
    return np.repeat(need[:, None], 2 * model.n, axis=1)


def repair_rate_limits(plan, applied_prev, cfg: MpcConfig) -> np.ndarray:
    """Forward pass ``q_j <- min(q_j, q_{j-1} + rate)``; never raises a control."""
    plan = np.clip(np.array(plan, dtype=float), 0.0, cfg.b_max)
    if cfg.rate_limit <= 0:
        return plan
    if applied_prev is not None:
        plan[0] = np.minimum(plan[0], np.asarray(applied_prev) + cfg.rate_limit)
    for j in range(1, plan.shape[0]):
        plan[j] = np.minimum(plan[j], plan[j - 1] + cfg.rate_limit)
    return plan


# --------------------------------------------------------------------------
# MPC problem


class MpcProblem:
    """Objective/constraint oracle for one receding-horizon solve."""

    def __init__(self, state: EpiState, forecast: ForecastProfile, applied_prev,
                 model: NetworkModel, cfg: MpcConfig):
        state.validate()
        forecast.check(cfg.horizon, model.params)
        if state.n != model.n:
            raise ContractError("state dimension differs from model")
        self.model, self.cfg = model, cfg
        self.n, self.horizon = model.n, cfg.horizon
        self.x0 = state.as_array()
        self.betas = forecast.as_array()
        self.prev = None if applied_prev is None else np.asarray(
            applied_prev.as_array() if isinstance(applied_prev, ControlVector) else applied_prev, float)
        self.terminal_cfg = cfg.terminal(model)
        self.beta_max = self.terminal_cfg.beta_max.as_array()
        self.q_safe = q_safe_array(self.n, cfg.b_max)
        self.p_diag = cfg.terminal_diag(self.n)
        self.w2 = np.concatenate([model.weights, model.weights])
        self.dt = cfg.step.dt_sample
        self.tighten = cfg.solver.feas_margin
        self.obj_scale = 1.0 / (max(cfg.rho, 1e-3) * self.dt / self.n)
        self._vec = [None] * (self.horizon + 1)
        self._cache_key = None
        self._cache = None

    # -- helpers
    def project(self, z):
        return project_rate_box(z, self.cfg.b_max, self.cfg.rate_limit, self.prev)

    def rollout(self, z):
        return rollout_array(self.x0, z, self.betas, self.model, self.cfg.step)

    def _rollout_cost(self, traj):
        n = self.n
        k = traj[..., :-1, 3 * n:]
        burden = np.sum(k * self.model.weights, axis=(-1, -2)) * self.dt
        xh = traj[..., -1, :]
        return burden + 0.5 * np.sum(xh * xh * self.p_diag, axis=-1)

    def _direct_cost(self, z, grad=False):
        n = self.n
        cfg = self.cfg
        val = 0.5 * cfg.rho * self.dt * float(np.sum(z * z * self.w2))
        g = cfg.rho * self.dt * z * self.w2 if grad else None
        if cfg.rho_smooth > 0:
            full = z if self.prev is None else np.vstack([self.prev[None, :], z])
            inc = np.maximum(0.0, np.diff(full, axis=0))
            val += cfg.rho_smooth * float(np.sum(inc ** 2 * self.w2))
            if grad:
                d = 2 * cfg.rho_smooth * inc * self.w2
                gs = np.zeros_like(full)
                gs[1:] += d
                gs[:-1] -= d
                g = g + (gs if self.prev is None else gs[1:])
        return (val, g) if grad else val

    def _matrix(self, j, s, q):
        beta = self.betas[j] if j < self.horizon else self.beta_max
        return infected_matrix_array(s, q, beta, self.model.flow, self.model.params)

    def _spectra(self, traj, z, vectors):
        n = self.n
        out = []
        for j in range(self.horizon + 1):
            s = traj[j, :n]
            q = z[j] if j < self.horizon else self.q_safe
            hint = irreducible_hint(s, self.model)
            prev_vec = self._vec[j] or (None, None)
            res = spectral_abscissa(self._matrix(j, s, q), left0=prev_vec[0], right0=prev_vec[1],
                                    irreducible=hint, vectors=vectors and hint)
            if res.right_vec is not None:
                self._vec[j] = (res.left_vec if res.left_vec is not None else prev_vec[0], res.right_vec)
            out.append(res)
        return out

    # -- evaluation with gradients (cached per plan)
    def _evaluate(self, z, grad):
        key = z.tobytes()
        if self._cache_key == key and (self._cache["grad"] or not grad):
            return self._cache
        if grad and self.cfg.solver.gradient == "adjoint":
            traj, stages = self._rollout_stages(z)
        else:
            traj, stages = self.rollout(z), None
        spectra = self._spectra(traj, z, vectors=grad)
        lam = np.array([r.lambda_max for r in spectra])
        result = {"traj": traj, "lam": lam, "rcost": float(self._rollout_cost(traj)), "grad": grad}
        if grad:
            if stages is None:
                result.update(self._fd_jacobians(z, spectra))
            else:
                result.update(self._adjoint_data(z, traj, stages, spectra))
        self._cache_key, self._cache = key, result
        return result

    def _rollout_stages(self, z):
        return rollout_with_stages(self.x0, z, self.betas, self.model, self.cfg.step)

    def _pullback(self, z, stages, seeds):
        """Gradients w.r.t. the plan of ``sum_j seeds[..., j, :] . x_j`` along the nominal rollout."""
        return pullback(stages, z, self.betas, self.model, self.cfg.step, seeds)

    def _dlam_ds(self, j, res):
        n = self.n
        G = res.derivative()
        beta = self.betas[j] if j < self.horizon else self.beta_max
        flow = self.model.flow
        return G, beta[0] * np.sum(G[:n, :n] * flow, axis=1) + beta[1] * np.sum(G[:n, n:] * flow, axis=1)

    def _adjoint_data(self, z, traj, stages, spectra):
        n, horizon = self.n, self.horizon
        # row 0: rollout cost; row 1 + j: spectral constraint j through s_j
        seeds = np.zeros((horizon + 2, horizon + 1, 4 * n))
        seeds[0, :horizon, 3 * n:] = self.model.weights * self.dt
        seeds[0, horizon] = self.p_diag * traj[horizon]
        diags = []
        for j, res in enumerate(spectra):
            if res.left_vec is None:
                diags.append(None)
                continue
            G, ds = self._dlam_ds(j, res)
            seeds[1 + j, j, :n] = ds
            diags.append(np.diag(G))
        grads = self._pullback(z, stages, seeds)
        jac = grads[1:]
        for j in range(horizon):
            if diags[j] is not None:
                jac[j, j] -= diags[j]
        return {"g_roll": grads[0], "jac": jac}

    def _fd_jacobians(self, z, spectra):
        n, horizon = self.n, self.horizon
        b = self.cfg.b_max
        flat = z.ravel()
        size = flat.size
        h = self.cfg.solver.fd_step * np.maximum(1.0, np.abs(flat))
        up = np.where(flat + h <= b, h, 0.0)
        down = np.where(flat - h >= 0, h, 0.0)
        # at most one side can be clipped because 2h << b
        eye = np.eye(size)
        plus = flat[None, :] + eye * up[:, None]
        minus = flat[None, :] - eye * down[:, None]
        batch = np.concatenate([plus, minus]).reshape(2 * size, horizon, 2 * n)
        trajs = self.rollout(batch)
        denom = up + down
        rc = self._rollout_cost(trajs)
        g_roll = ((rc[:size] - rc[size:]) / denom).reshape(horizon, 2 * n)
        s_all = trajs[..., :n]
        ds = (s_all[:size] - s_all[size:]) / denom[:, None, None]          # (K, H+1, n)
        jac = np.zeros((horizon + 1, horizon, 2 * n))
        for j, res in enumerate(spectra):
            if res.left_vec is None:
                continue
            G, dlam_ds = self._dlam_ds(j, res)
            jac[j] = (ds[:, j, :] @ dlam_ds).reshape(horizon, 2 * n)
            if j < horizon:
                jac[j, j] -= np.diag(G)
        return {"g_roll": g_roll, "jac": jac}

    # -- oracle interface for the solver
    def objective(self, z, grad=False):
        ev = self._evaluate(z, grad)
        if not grad:
            return (ev["rcost"] + self._direct_cost(z)) * self.obj_scale
        val, g = self._direct_cost(z, grad=True)
        return (ev["rcost"] + val) * self.obj_scale, (ev["g_roll"] + g) * self.obj_scale

    def constraints(self, z, grad=False):
        ev = self._evaluate(z, grad)
        c = ev["lam"] + self.cfg.alpha + self.tighten
        return (c, ev["jac"]) if grad else c

    # -- plan assessment
    def assess(self, z):
        traj = self.rollout(z)
        spectra = self._spectra(traj, z, vectors=False)
        lam = np.array([r.lambda_max for r in spectra])
        margins = -self.cfg.alpha - lam
        cost = total_cost(traj, z, self.model, self.cfg, self.prev)
        viol = rate_box_violation(z, self.cfg.b_max, self.cfg.rate_limit, self.prev)
        feasible = bool(margins.min() >= -MARGIN_TOL and viol <= 1e-12)
        return {"traj": traj, "margins": margins[:-1], "terminal_margin": float(margins[-1]),
                "cost": cost, "feasible": feasible, "violation": viol}


def check_shifted_candidate(prev: MpcSolution, state: EpiState, forecast: ForecastProfile,
                            model: NetworkModel, cfg: MpcConfig, applied_prev=None) -> CandidateCheck:
    """Verify the shifted plan ``(q*_1, ..., q*_{H-1}, q_safe)`` at the new sampling instant.

    ``feasible`` covers dynamics, spectral steps, box and terminal set. Rate
    limits are reported separately in ``rate_ok``: appending ``q_safe`` can
    jump by more than the rate limit.
    """
    cand = warm_start(prev, state, forecast, model, cfg)
    problem = MpcProblem(state, forecast, applied_prev, model, cfg)
    a = problem.assess(cand)
    box_ok = bool(cand.min() >= 0 and cand.max() <= cfg.b_max)
    rate_ok = rate_box_violation(cand, cfg.b_max, cfg.rate_limit, problem.prev) <= 1e-12
    feasible = bool(a["margins"].min() >= -MARGIN_TOL and a["terminal_margin"] >= -MARGIN_TOL and box_ok)
    return CandidateCheck(feasible, a["margins"], a["terminal_margin"], box_ok, rate_ok)


def solve_mpc(current_state: EpiState, forecast: ForecastProfile, prev: Optional[MpcSolution],
              applied_prev, model: NetworkModel, cfg: MpcConfig) -> MpcSolution:
    """Solve the receding-horizon problem; never return an unsafe plan.

    The optimiser starts from the best feasible of: the (rate-repaired)
    shifted/cold warm start and the uniform ramp. If the optimised plan is
    infeasible or costs more than that start, the start is returned with
    ``provenance="warm-start-fallback"``. If no feasible plan is known at all,
    :class:`InfeasibleError` is raised carrying the myopic best-effort control.
    """
    problem = MpcProblem(current_state, forecast, applied_prev, model, cfg)
    sc = cfg.solver
    ws = warm_start(prev, current_state, forecast, model, cfg)
    candidates = [repair_rate_limits(ws, problem.prev, cfg)]
    assessed = [problem.assess(candidates[0])]
    if not assessed[0]["feasible"]:
        ramp = ramp_start(current_state, forecast, problem.prev, model, cfg)
        if ramp is not None:
            candidates.append(ramp)
            assessed.append(problem.assess(ramp))
    feas = [i for i, a in enumerate(assessed) if a["feasible"]]
    start_idx = min(feas, key=lambda i: assessed[i]["cost"]) if feas else 0
    start, start_a = candidates[start_idx], assessed[start_idx]

    mult = None
    if prev is not None and prev.multipliers is not None:
        pm = prev.multipliers
        mult = np.concatenate([pm[1:cfg.horizon], pm[cfg.horizon - 1:cfg.horizon], pm[-1:]])
    z, info = augmented_lagrangian(
        problem.objective, problem.constraints, problem.project, start, multipliers=mult,
        max_outer=sc.max_outer, max_inner=sc.max_inner, penalty_init=sc.penalty_init,
        penalty_growth=sc.penalty_growth, tol=sc.tol, ctol=0.5 * sc.feas_margin,
    )
    opt_a = problem.assess(z)
    log.debug("mpc solve: outer=%d grads=%d viol=%.2e pg=%.2e start_feasible=%s",
              info.outer, info.grads, info.max_violation, info.stationarity, start_a["feasible"])

    def pack(plan, a, provenance):
        return MpcSolution(plan, a["traj"], a["cost"], a["margins"], a["terminal_margin"],
                           a["feasible"], provenance, start_a["cost"], info.multipliers,
                           problem.betas, info.grads)

    if opt_a["feasible"] and (not start_a["feasible"] or opt_a["cost"] <= start_a["cost"] + 1e-12):
        return pack(z, opt_a, "optimized")
    if start_a["feasible"]:
        return pack(start, start_a, "warm-start-fallback")
    best = solve_myopic(current_state, forecast[0], applied_prev, model, cfg)
    raise InfeasibleError(
        f"no feasible MPC plan found (max spectral violation {-opt_a['margins'].min():.3e})",
        best_effort=best,
    )


# --------------------------------------------------------------------------
# myopic baseline


def solve_myopic(current_state: EpiState, beta_now: TransmissionRate, applied_prev,
                 model: NetworkModel, cfg: MpcConfig) -> MyopicDecision:
    """Minimise the instantaneous cost under the spectral constraint at the measured state.

    When the rate limit makes the constraint unreachable, the maximum
    admissible update ``min(q_prev + rate, B)`` is returned with
    ``feasible=False``.
    """
    n = model.n
    s = current_state.s
    beta = beta_now.as_array()
    prev = None if applied_prev is None else np.asarray(
        applied_prev.as_array() if isinstance(applied_prev, ControlVector) else applied_prev, float)
    upper = np.full(2 * n, cfg.b_max)
    if prev is not None and cfg.rate_limit > 0:
        upper = np.minimum(upper, prev + cfg.rate_limit)
    hint = irreducible_hint(s, model)

    def margin(q):
        m = infected_matrix_array(s, q, beta, model.flow, model.params)
        return -cfg.alpha - spectral_abscissa(m, irreducible=hint, vectors=False).lambda_max

    m_top = margin(upper)
    if m_top < 0:
        return MyopicDecision(ControlVector.from_array(upper), False, m_top)
    zero = np.zeros(2 * n)
    m_zero = margin(zero)
    if m_zero >= 0:
        return MyopicDecision(ControlVector.from_array(zero), True, m_zero)

    w2 = np.concatenate([model.weights, model.weights])
    scale = 1.0 / (max(cfg.rho, 1e-3) / n)
    tighten = cfg.solver.feas_margin
    vec = [None, None]

    def objective(z, grad=False):
        val = 0.5 * cfg.rho * float(np.sum(w2 * z * z)) * scale
        return (val, cfg.rho * w2 * z * scale) if grad else val

    def constraints(z, grad=False):
        q = z[0]
        m = infected_matrix_array(s, q, beta, model.flow, model.params)
        res = spectral_abscissa(m, left0=vec[0], right0=vec[1], irreducible=hint, vectors=grad and hint)
        if res.left_vec is not None:
            vec[0], vec[1] = res.left_vec, res.right_vec
        c = np.array([res.lambda_max + cfg.alpha + tighten])
        if not grad:
            return c
        jac = -np.diag(res.derivative())[None, None, :] if res.left_vec is not None else np.zeros((1, 1, 2 * n))
        return c, jac

    def project(z):
        return np.clip(z, 0.0, upper)

    sc = cfg.solver
    z, _ = augmented_lagrangian(objective, constraints, project, upper[None, :],
                                max_outer=sc.max_outer, max_inner=4 * sc.max_inner,
                                penalty_init=sc.penalty_init, penalty_growth=sc.penalty_growth,
                                tol=sc.tol, ctol=0.5 * tighten)
    q = z[0]
    m_q = margin(q)
    if m_q < 0:
        # convex feasible set: back off along the segment towards the feasible upper corner
        lo, hi = 0.0, 1.0
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if margin((1 - mid) * q + mid * upper) >= 0:
                hi = mid
            else:
                lo = mid
        q = (1 - hi) * q + hi * upper
        m_q = margin(q)
    return MyopicDecision(ControlVector.from_array(q), True, m_q)
