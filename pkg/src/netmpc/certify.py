"""Decay certificates, terminal set membership and the two-phase continuation bound.

All exponential bounds are evaluated in log space: the amplification
constants ``(1 / v_floor)^(M + 1)`` overflow quickly for long runs.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import ContractError
from .integrator import StepConfig, rk4_interval, rollout_array
from .netmodel import EpiState, NetworkModel, TransmissionRate
from .spectral import infected_matrix_array, irreducible_hint, spectral_abscissa

MARGIN_TOL = 1e-9
BOUND_RTOL = 1e-9


@dataclass(frozen=True)
class TerminalConfig:
    alpha: float
    b_max: float
    beta_max: TransmissionRate

    def __post_init__(self):
        if not self.alpha > 0 or not self.b_max > 0:
            raise ContractError("alpha and b_max must be > 0")
        if isinstance(self.beta_max, (tuple, list, np.ndarray)):
            object.__setattr__(self, "beta_max", TransmissionRate(*map(float, self.beta_max)))


def q_safe_array(n: int, b_max: float) -> np.ndarray:
    return np.full(2 * n, float(b_max))


def _perron(s, q, beta, model: NetworkModel, vectors: bool = False):
    m = infected_matrix_array(s, q, beta, model.flow, model.params)
    hint = irreducible_hint(s, model)
    return spectral_abscissa(m, irreducible=hint, vectors=vectors and hint)


def terminal_margin_array(s, model: NetworkModel, cfg: TerminalConfig) -> tuple[bool, float]:
    """``(inside, margin)`` with ``margin = -alpha - lambda_max(M(s, q_safe | beta_max))``."""
    res = _perron(s, q_safe_array(model.n, cfg.b_max), cfg.beta_max.as_array(), model)
    margin = -cfg.alpha - res.lambda_max
    return margin >= 0.0, float(margin)


def in_terminal_set(state: EpiState, model: NetworkModel, cfg: TerminalConfig) -> tuple[bool, float]:
    """Membership of the robust terminal set, with the signed spectral margin."""
    if state.n != model.n:
        raise ContractError("state dimension differs from model")
    return terminal_margin_array(state.s, model, cfg)


def check_terminal_invariance(state: EpiState, beta: TransmissionRate, model: NetworkModel,
                              cfg: TerminalConfig, step: StepConfig) -> bool:
    """Whether one interval under ``q_safe`` keeps a terminal-set state inside the set."""
    inside, margin = in_terminal_set(state, model, cfg)
    if not inside:
        raise ContractError(f"state is outside the terminal set (margin {margin:.3e})")
    b, bmax = beta.as_array(), cfg.beta_max.as_array()
    if np.any(b > bmax):
        raise ContractError("beta exceeds beta_max")
    x = rk4_interval(state.as_array(), q_safe_array(model.n, cfg.b_max), b, model,
                     step.dt_sample, step.substeps)
    return terminal_margin_array(x[:model.n], model, cfg)[0]


# --------------------------------------------------------------------------
# decay certificate


@dataclass(frozen=True)
class DecayCertificate:
    alpha: float
    v_floor: float
    log10_c_t: float
    steps: int
    per_step_margins: tuple
    valid: bool
    first_violation: Optional[int] = None
    bound_ok: bool = True
    bound_violations: int = 0
    max_log10_ratio: float = -math.inf

    @property
    def c_t(self) -> float:
        """``(1 / v_floor)^(steps + 1)``; ``inf`` when it exceeds the float range."""
        if not math.isfinite(self.log10_c_t) or self.log10_c_t > 308:
            return math.inf
        return 10.0 ** self.log10_c_t

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_step_margins"] = list(self.per_step_margins)
        c_t = self.c_t
        d["c_t"] = c_t if math.isfinite(c_t) else None
        for key in ("log10_c_t", "max_log10_ratio", "v_floor"):
            if not math.isfinite(d[key]):
                d[key] = None
        return d

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def certify_arrays(times, states, controls, betas, model: NetworkModel, cfg: TerminalConfig) -> DecayCertificate:
    """Certificate from per-instant measured states and applied ``(q_m, beta_m)``.

    ``states`` has shape ``(M + 1, 4n)``; ``controls`` ``(M + 1, 2n)`` and
    ``betas`` ``(M + 1, 2)`` hold the inputs decided at each instant.
    """
    times = np.asarray(times, dtype=float)
    states = np.asarray(states, dtype=float)
    controls = np.asarray(controls, dtype=float)
    betas = np.asarray(betas, dtype=float)
    count = times.shape[0]
    if count == 0 or states.shape[0] != count or controls.shape[0] != count or betas.shape[0] != count:
        raise ContractError("certificate needs equal-length times, states, controls and betas")
    n = model.n
    if states.shape[1] != 4 * n or controls.shape[1] != 2 * n or betas.shape[1] != 2:
        raise ContractError("state/control/beta widths do not match the model")
    margins = np.empty(count)
    v_floor = math.inf
    for m in range(count):
        res = _perron(states[m, :n], controls[m], betas[m], model, vectors=True)
        margins[m] = -cfg.alpha - res.lambda_max
        v_floor = min(v_floor, float(res.left_vec.min())) if res.left_vec is not None else 0.0
    steps = count - 1
    log10_c_t = (steps + 1) * -math.log10(v_floor) if v_floor > 0 else math.inf
    bad = np.flatnonzero(margins < -MARGIN_TOL)
    valid = bad.size == 0 and v_floor > 0

    y = np.abs(states[:, n:3 * n]).sum(axis=1)
    bound_violations, max_ratio = 0, -math.inf
    if y[0] > 0 and math.isfinite(log10_c_t):
        with np.errstate(divide="ignore"):
            log_ratio = np.log10(y / y[0]) + cfg.alpha * (times - times[0]) / math.log(10) - log10_c_t
        max_ratio = float(log_ratio.max())
        bound_violations = int(np.sum(log_ratio > math.log10(1 + BOUND_RTOL)))
    bound_ok = bound_violations == 0
    return DecayCertificate(
        alpha=cfg.alpha, v_floor=float(v_floor), log10_c_t=float(log10_c_t), steps=steps,
        per_step_margins=tuple(float(v) for v in margins), valid=bool(valid and bound_ok),
        first_violation=int(bad[0]) if bad.size else None, bound_ok=bound_ok,
        bound_violations=bound_violations, max_log10_ratio=max_ratio,
    )


def certify_decay(record, model: NetworkModel, cfg: TerminalConfig) -> DecayCertificate:
    """Recompute the decay certificate of a closed-loop record.

    ``record`` must expose ``times``, ``state_array``, ``control_array`` and
    ``beta_array`` (one row per sampling instant).
    """
    try:
        arrays = (record.times, record.state_array, record.control_array, record.beta_array)
    except AttributeError as exc:
        raise ContractError(f"record lacks per-step provenance: {exc}") from None
    if any(a is None for a in arrays):
        raise ContractError("record lacks per-step provenance")
    return certify_arrays(*arrays, model, cfg)


def intersample_check(state: EpiState, control, beta: TransmissionRate, model: NetworkModel,
                      step: StepConfig, points: int = 10) -> tuple[bool, float, float]:
    """Spectral abscissa on an intra-interval grid never exceeds its value at the sample.

    Returns ``(ok, lambda_at_sample, max_lambda_on_grid)``.
    """
    q = control.as_array() if hasattr(control, "as_array") else np.asarray(control, float)
    b = beta.as_array()
    x = state.as_array()
    lam0 = _perron(x[:model.n], q, b, model).lambda_max
    worst = -math.inf
    sub = max(1, math.ceil(step.substeps / points))
    for _ in range(points):
        x = rk4_interval(x, q, b, model, step.dt_sample / points, sub)
        worst = max(worst, _perron(x[:model.n], q, b, model).lambda_max)
    return worst <= lam0 + MARGIN_TOL, lam0, worst


# --------------------------------------------------------------------------
# two-phase continuation


@dataclass(frozen=True, eq=False)
class Continuation:
    """Apply ``phase1`` (one row per interval), then ``q_safe`` forever."""

    phase1: np.ndarray
    q_safe: np.ndarray
    phase1_betas: np.ndarray
    log10_c_h: float
    log10_c_inf: float
    v_star: np.ndarray
    shortcut: bool = False

    @property
    def log10_c(self) -> float:
        return self.log10_c_h + self.log10_c_inf

    @property
    def c_h(self) -> float:
        return 10.0 ** self.log10_c_h if self.log10_c_h < 308 else math.inf

    @property
    def c_inf(self) -> float:
        return 10.0 ** self.log10_c_inf

    @property
    def c(self) -> float:
        return 10.0 ** self.log10_c if self.log10_c < 308 else math.inf

    def to_dict(self) -> dict:
        finite = lambda v: v if math.isfinite(v) else None
        return {"C_H": finite(self.c_h), "C_inf": finite(self.c_inf), "C": finite(self.c),
                "log10_C_H": self.log10_c_h, "log10_C_inf": self.log10_c_inf, "log10_C": self.log10_c,
                "phase1_steps": int(self.phase1.shape[0]), "shortcut": self.shortcut}


def build_continuation(state: EpiState, mpc_solution, model: NetworkModel, cfg: TerminalConfig,
                       two_phase: bool = False) -> Continuation:
    """Two-phase stabilising continuation and its constant ``C = C_H * C_inf``.

    When the state is already in the terminal set the constant reduces to
    ``C_inf`` (phase 1 is empty) unless ``two_phase`` forces the full
    construction from the stored plan.
    """
    n = model.n
    q_safe = q_safe_array(n, cfg.b_max)
    bmax = cfg.beta_max.as_array()
    inside, _ = in_terminal_set(state, model, cfg)

    def c_inf_at(s):
        res = _perron(s, q_safe, bmax, model, vectors=True)
        if res.left_vec is None:
            raise ContractError("terminal matrix is reducible; no Perron weight available")
        return -math.log10(float(res.left_vec.min())), res.left_vec

    if inside and not two_phase:
        log_inf, v_star = c_inf_at(state.s)
        return Continuation(np.zeros((0, 2 * n)), q_safe, np.zeros((0, 2)), 0.0, log_inf, v_star, True)

    if mpc_solution is None or not mpc_solution.feasible:
        raise ContractError("continuation needs a feasible MPC solution")
    predicted = np.asarray(mpc_solution.predicted)
    controls = np.asarray(mpc_solution.controls)
    betas = np.asarray(mpc_solution.betas)
    if not np.allclose(predicted[0], state.as_array(), rtol=0, atol=1e-12):
        raise ContractError("MPC solution was not computed at this state")
    t_inside, t_margin = terminal_margin_array(predicted[-1, :n], model, cfg)
    if not t_inside and t_margin < -MARGIN_TOL:
        raise ContractError(f"predicted terminal state is outside the terminal set (margin {t_margin:.3e})")
    horizon = controls.shape[0]
    v_floor = math.inf
    for j in range(horizon):
        res = _perron(predicted[j, :n], controls[j], betas[j], model, vectors=True)
        if res.left_vec is None:
            raise ContractError(f"stage matrix {j} is reducible")
        v_floor = min(v_floor, float(res.left_vec.min()))
    log_h = (horizon + 1) * -math.log10(v_floor)
    log_inf, v_star = c_inf_at(predicted[-1, :n])
    return Continuation(controls.copy(), q_safe, betas.copy(), log_h, log_inf, v_star, False)


@dataclass(frozen=True, eq=False)
class ContinuationRun:
    times: np.ndarray
    y_norm: np.ndarray
    bound: np.ndarray           # C e^{-alpha t} ||y(t_0)||_1
    violations: int
    max_ratio: float            # max ||y|| / bound


def simulate_continuation(state: EpiState, cont: Continuation, model: NetworkModel,
                          cfg: TerminalConfig, step: StepConfig, weeks: int = 52,
                          safe_beta: Optional[TransmissionRate] = None) -> ContinuationRun:
    """Run phase 1 under its forecast, then ``q_safe`` for ``weeks`` intervals.

    Phase 2 uses ``safe_beta`` (default ``beta_max``, the worst case).
    """
    n = model.n
    beta2 = (safe_beta or cfg.beta_max).as_array()
    if np.any(beta2 > cfg.beta_max.as_array()):
        raise ContractError("phase-2 beta exceeds beta_max")
    controls = np.vstack([cont.phase1, np.repeat(cont.q_safe[None, :], weeks, axis=0)])
    betas = np.vstack([cont.phase1_betas, np.repeat(beta2[None, :], weeks, axis=0)])
    traj = rollout_array(state.as_array(), controls, betas, model, step)
    times = step.dt_sample * np.arange(traj.shape[0])
    y = np.abs(traj[:, n:3 * n]).sum(axis=1)
    log_c = cont.log10_c
    # stay in log space; the bound itself may not be representable
    with np.errstate(divide="ignore"):
        log_ratio = np.log10(y / y[0]) + cfg.alpha * times / math.log(10) - log_c
    bound = y[0] * np.power(10.0, np.minimum(log_c, 300.0)) * np.exp(-cfg.alpha * times)
    violations = int(np.sum(log_ratio > math.log10(1 + BOUND_RTOL)))
    return ContinuationRun(times, y, bound, violations, float(10.0 ** min(log_ratio.max(), 300.0)))
