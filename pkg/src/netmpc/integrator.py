"""Fixed-step RK4 discretisation of the SIQR flow under piecewise-constant inputs.

Every entry point runs the same compiled interval kernel, so a rollout equals
the composition of single steps bit for bit. States are checked after each
substep; a violation raises :class:`StepSizeError` instead of being clamped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernels as K
from .errors import ContractError, StepSizeError
from .netmodel import ControlVector, EpiState, ForecastProfile, NetworkModel, TransmissionRate

_STATUS = {
    1: "non-finite state",
    2: "a compartment left [0, 1]",
    3: "a susceptible fraction increased",
}


@dataclass(frozen=True)
class StepConfig:
    dt_sample: float = 7.0
    substeps: int = 7

    def __post_init__(self):
        if not self.dt_sample > 0:
            raise ContractError(f"dt_sample must be > 0, got {self.dt_sample}")
        if int(self.substeps) != self.substeps or self.substeps < 1:
            raise ContractError(f"substeps must be an integer >= 1, got {self.substeps}")

    @property
    def h(self) -> float:
        return self.dt_sample / self.substeps


def positivity_substeps(dt: float, params, b_max: float, minimum: int = 7) -> int:
    """Substeps with ``h * c <= 1`` for the fastest linear decay rate ``c``.

    Classical RK4 maps nonnegative states of a Metzler linear flow to
    nonnegative states when ``h * c <= 1`` (its threshold factor is one).
    """
    c = max(params.eps + params.r_a, params.r_s, params.r_q) + b_max
    return max(minimum, math.ceil(dt * c - 1e-12))


def _raise(status: int, dt: float, substeps: int):
    raise StepSizeError(
        f"RK4 substep h={dt / substeps:g} failed: {_STATUS[status]}; increase substeps"
    )


def _consts(model: NetworkModel):
    p = model.params
    return model.flow, p.eps, p.r_a, p.r_s, p.r_q


def _f64(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64)


def rk4_interval(x, q, beta, model: NetworkModel, dt: float, substeps: int, check: bool = True) -> np.ndarray:
    """Integrate ``substeps`` RK4 steps of size ``dt / substeps`` with inputs held fixed.

    ``x`` may carry leading batch axes; ``q`` and ``beta`` broadcast against it.
    """
    x = _f64(x)
    q = _f64(q)
    beta = _f64(beta)
    if x.shape[-1] != 4 * model.n or q.shape[-1] != 2 * model.n:
        raise ContractError(f"dimension mismatch with model n={model.n}")
    consts = _consts(model)
    dummy = np.empty((0, 4, x.shape[-1]))
    if x.ndim == 1 and q.ndim == 1 and beta.ndim == 1:
        out, status = K.rk4_interval(x, q, beta[0], beta[1], *consts, float(dt), int(substeps),
                                     check, dummy, False)
        if status:
            _raise(status, dt, substeps)
        return out
    lead = np.broadcast_shapes(x.shape[:-1], q.shape[:-1], beta.shape[:-1])
    xb = np.broadcast_to(x, lead + x.shape[-1:]).reshape(-1, x.shape[-1])
    qb = np.broadcast_to(q, lead + q.shape[-1:]).reshape(-1, q.shape[-1])
    bb = np.broadcast_to(beta, lead + (2,)).reshape(-1, 2)
    out = np.empty_like(xb)
    for i in range(xb.shape[0]):
        out[i], status = K.rk4_interval(_f64(xb[i]), _f64(qb[i]), bb[i, 0], bb[i, 1], *consts,
                                        float(dt), int(substeps), check, dummy, False)
        if status:
            _raise(status, dt, substeps)
    return out.reshape(lead + x.shape[-1:])


def rollout_array(x0, controls, betas, model: NetworkModel, cfg: StepConfig, check: bool = True) -> np.ndarray:
    """Roll out ``H`` sampling intervals from one start state.

    ``controls`` has shape ``(..., H, 2n)`` and ``betas`` shape ``(H, 2)``; the
    result has shape ``(..., H + 1, 4n)`` with the initial state first.
    """
    controls = _f64(controls)
    betas = _f64(betas)
    x0 = _f64(x0)
    horizon = controls.shape[-2]
    if betas.shape != (horizon, 2):
        raise ContractError(f"controls ({horizon}) and forecast {betas.shape} lengths differ")
    if x0.shape != (4 * model.n,) or controls.shape[-1] != 2 * model.n:
        raise ContractError(f"dimension mismatch with model n={model.n}")
    consts = _consts(model)
    if controls.ndim == 2:
        traj, status = K.rollout(x0, controls, betas, *consts, cfg.dt_sample, cfg.substeps, check)
    else:
        flat = _f64(controls.reshape((-1,) + controls.shape[-2:]))
        traj, status = K.rollout_batch(x0, flat, betas, *consts, cfg.dt_sample, cfg.substeps, check)
        traj = traj.reshape(controls.shape[:-2] + traj.shape[-2:])
    if status:
        _raise(status, cfg.dt_sample, cfg.substeps)
    return traj


def rollout_with_stages(x0, controls, betas, model: NetworkModel, cfg: StepConfig):
    """Checked rollout plus the RK4 stage points needed by :func:`pullback`."""
    traj, stages, status = K.rollout_stages(_f64(x0), _f64(controls), _f64(betas), *_consts(model),
                                            cfg.dt_sample, cfg.substeps)
    if status:
        _raise(status, cfg.dt_sample, cfg.substeps)
    return traj, stages


def pullback(stages, controls, betas, model: NetworkModel, cfg: StepConfig, seeds) -> np.ndarray:
    """Reverse-mode gradient w.r.t. the controls of ``sum_j seeds[..., j, :] . x_j``.

    ``seeds`` has shape ``(..., H + 1, 4n)``; the result ``(..., H, 2n)``.
    """
    seeds = _f64(seeds)
    lead = seeds.shape[:-2]
    flat = _f64(seeds.reshape((-1,) + seeds.shape[-2:]))
    grad = K.pullback(stages, _f64(controls), _f64(betas), *_consts(model), cfg.dt_sample, flat)
    return grad.reshape(lead + grad.shape[-2:])


def psi_step(state: EpiState, control: ControlVector, beta: TransmissionRate,
             model: NetworkModel, cfg: StepConfig) -> EpiState:
    """One sampling interval of the plant/prediction map."""
    if state.n != model.n or control.n != model.n:
        raise ContractError(f"dimension mismatch with model n={model.n}")
    x = rk4_interval(state.as_array(), control.as_array(), beta.as_array(), model,
                     cfg.dt_sample, cfg.substeps)
    return EpiState.from_array(x)


def rollout(state: EpiState, controls: Sequence[ControlVector], forecast: ForecastProfile,
            model: NetworkModel, cfg: StepConfig) -> list[EpiState]:
    if len(controls) != len(forecast):
        raise ContractError(f"{len(controls)} controls vs forecast of length {len(forecast)}")
    traj = [state]
    for q, beta in zip(controls, forecast):
        traj.append(psi_step(traj[-1], q, beta, model, cfg))
    return traj
