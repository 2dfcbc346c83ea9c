"""Networked SIQR model: parameter/state types and the continuous vector field.

State arrays use the flat layout ``[s, xa, xs, k]`` (length ``4n``), controls
``[qa, qs]`` (length ``2n``) and transmission ``[beta_a, beta_s]``. The typed
wrappers below convert to and from that layout; the numerical core works on
(possibly batched) arrays so that rollouts can be vectorised.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .errors import ContractError

WEIGHT_TOL = 1e-12


@dataclass(frozen=True)
class EpiParams:
    eps: float = 0.32
    r_a: float = 0.2
    r_s: float = 0.2
    r_q: float = 0.2
    beta_max_a: float = 1.0
    beta_max_s: float = 1.0

    def __post_init__(self):
        for name in ("eps", "r_a", "r_s", "r_q", "beta_max_a", "beta_max_s"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ContractError(f"EpiParams.{name} must be > 0, got {value!r}")

    @property
    def beta_max(self) -> "TransmissionRate":
        return TransmissionRate(self.beta_max_a, self.beta_max_s)


@dataclass(frozen=True)
class TransmissionRate:
    beta_a: float
    beta_s: float

    def __post_init__(self):
        if not (self.beta_a > 0 and self.beta_s > 0):
            raise ContractError(f"transmission rates must be > 0, got {self}")

    def check_bounds(self, params: EpiParams, tol: float = 1e-12) -> None:
        if self.beta_a > params.beta_max_a * (1 + tol) or self.beta_s > params.beta_max_s * (1 + tol):
            raise ContractError(
                f"transmission {self} exceeds beta_max=({params.beta_max_a}, {params.beta_max_s})"
            )

    def as_array(self) -> np.ndarray:
        return np.array([self.beta_a, self.beta_s], dtype=float)

    def scaled(self, factor: float) -> "TransmissionRate":
        return TransmissionRate(self.beta_a * factor, self.beta_s * factor)


@dataclass(frozen=True, eq=False)
class ForecastProfile:
    entries: tuple

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        for b in self.entries:
            if not isinstance(b, TransmissionRate):
                raise ContractError("forecast entries must be TransmissionRate values")

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, j):
        return self.entries[j]

    def as_array(self) -> np.ndarray:
        if not self.entries:
            return np.zeros((0, 2))
        return np.array([b.as_array() for b in self.entries])

    def check(self, horizon: int, params: EpiParams) -> None:
        if len(self.entries) != horizon:
            raise ContractError(f"forecast length {len(self.entries)} != horizon {horizon}")
        for b in self.entries:
            b.check_bounds(params)


@dataclass(frozen=True, eq=False)
class EpiState:
    s: np.ndarray
    xa: np.ndarray
    xs: np.ndarray
    k: np.ndarray

    def __post_init__(self):
        for name in ("s", "xa", "xs", "k"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        n = self.s.shape
        if len(n) != 1 or any(getattr(self, c).shape != n for c in ("xa", "xs", "k")):
            raise ContractError("EpiState components must be 1-D vectors of equal length")

    @property
    def n(self) -> int:
        return self.s.shape[0]

    @property
    def y(self) -> np.ndarray:
        """Infected sub-state ``(xa, xs)``."""
        return np.concatenate([self.xa, self.xs])

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.s, self.xa, self.xs, self.k])

    @classmethod
    def from_array(cls, x) -> "EpiState":
        x = np.asarray(x, dtype=float)
        if x.ndim != 1 or x.shape[0] % 4:
            raise ContractError(f"state array must have length 4n, got shape {x.shape}")
        s, xa, xs, k = np.split(x, 4)
        return cls(s, xa, xs, k)

    def validate(self, tol: float = 1e-12) -> None:
        x = self.as_array()
        if not np.all(np.isfinite(x)):
            raise ContractError("state contains non-finite entries")
        if x.min() < -tol or x.max() > 1 + tol:
            raise ContractError("state proportions must lie in [0, 1]")
        if np.any(self.s + self.xa + self.xs + self.k > 1 + 1e-9):
            raise ContractError("per-node compartments sum above 1")


@dataclass(frozen=True, eq=False)
class ControlVector:
    qa: np.ndarray
    qs: np.ndarray

    def __post_init__(self):
        for name in ("qa", "qs"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.qa.ndim != 1 or self.qa.shape != self.qs.shape:
            raise ContractError("ControlVector components must be 1-D vectors of equal length")

    @property
    def n(self) -> int:
        return self.qa.shape[0]

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.qa, self.qs])

    @classmethod
    def from_array(cls, q) -> "ControlVector":
        q = np.asarray(q, dtype=float)
        if q.ndim != 1 or q.shape[0] % 2:
            raise ContractError(f"control array must have length 2n, got shape {q.shape}")
        qa, qs = np.split(q, 2)
        return cls(qa, qs)

    @classmethod
    def uniform(cls, n: int, value: float) -> "ControlVector":
        return cls(np.full(n, float(value)), np.full(n, float(value)))

    def validate(self, b_max: float, tol: float = 1e-12) -> None:
        q = self.as_array()
        if not np.all(np.isfinite(q)) or q.min() < -tol or q.max() > b_max + tol:
            raise ContractError(f"control outside [0, {b_max}]")


@dataclass(frozen=True, eq=False)
class NetworkModel:
    """Node populations, cost weights, flow matrix and epidemiological constants.

    Construction validates the invariants (positive populations, simplex
    weights, nonnegative and strongly connected flow) unless ``strict`` is
    false, which exists only so that broken models can be fed to
    :func:`validate_model` for diagnostics.
    """

    populations: np.ndarray
    flow: np.ndarray
    params: EpiParams
    weights: np.ndarray = None
    strict: bool = field(default=True, repr=False)

    def __post_init__(self):
        pops = np.array(self.populations, dtype=float)
        flow = np.array(self.flow, dtype=float)
        if self.weights is None:
            weights = pops / pops.sum()
        else:
            weights = np.array(self.weights, dtype=float)
        for arr in (pops, flow, weights):
            arr.setflags(write=False)
        object.__setattr__(self, "populations", pops)
        object.__setattr__(self, "flow", flow)
        object.__setattr__(self, "weights", weights)
        if pops.ndim != 1 or flow.shape != (pops.size, pops.size) or weights.shape != pops.shape:
            raise ContractError(
                f"inconsistent shapes: populations {pops.shape}, flow {flow.shape}, weights {weights.shape}"
            )
        if self.strict:
            report = validate_model(self)
            if not report.ok:
                raise ContractError("invalid network model: " + "; ".join(report.failures))

    @property
    def n(self) -> int:
        return self.populations.shape[0]

    @property
    def strongly_connected(self) -> bool:
        cached = self.__dict__.get("_strong")
        if cached is None:
            cached = is_strongly_connected(self.flow)
            object.__setattr__(self, "_strong", cached)
        return cached

    def with_params(self, params: EpiParams) -> "NetworkModel":
        return NetworkModel(self.populations, self.flow, params, self.weights, self.strict)


@dataclass(frozen=True)
class ValidationReport:
    failures: tuple = ()

    @property
    def ok(self) -> bool:
        return not self.failures

    def __bool__(self):
        return self.ok


def is_strongly_connected(adjacency: np.ndarray) -> bool:
    pattern = np.asarray(adjacency) > 0
    np.fill_diagonal(pattern, False)
    if pattern.shape[0] == 1:
        return True
    ncomp, _ = connected_components(csr_matrix(pattern), directed=True, connection="strong")
    return ncomp == 1


def validate_model(model: NetworkModel) -> ValidationReport:
    """Check the model invariants and return every violation found."""
    failures = []
    pops, flow, w = model.populations, model.flow, model.weights
    if not np.all(np.isfinite(pops)) or np.any(pops <= 0):
        failures.append("populations must be finite and > 0")
    if not np.all(np.isfinite(flow)):
        failures.append("flow matrix has non-finite entries")
    elif np.any(flow < 0):
        failures.append("flow matrix has negative entries")
    if not np.all(np.isfinite(w)) or abs(w.sum() - 1.0) > WEIGHT_TOL or np.any(w < 0):
        failures.append(f"weights must be nonnegative and sum to 1 (sum={w.sum()!r})")
    elif np.all(pops > 0) and np.max(np.abs(w - pops / pops.sum())) > WEIGHT_TOL:
        failures.append("weights must equal N_i / sum_j N_j")
    if np.all(np.isfinite(flow)) and not is_strongly_connected(flow):
        failures.append("flow graph lacks strong connectivity (every node must reach every other)")
    return ValidationReport(tuple(failures))


# --------------------------------------------------------------------------
# vector field


def _check_dims(n, *arrays):
    for a in arrays:
        if a.shape[-1] != n:
            raise ContractError(f"dimension mismatch: expected trailing size {n}, got {a.shape}")


def infection_force_array(xa, xs, beta, flow):
    """``sum_j a_ij (beta_a xa_j + beta_s xs_j)``; batched over leading axes."""
    beta = np.asarray(beta, dtype=float)
    weighted = beta[..., 0:1] * xa + beta[..., 1:2] * xs
    return weighted @ flow.T


def rhs_array(x, q, beta, flow, params: EpiParams):
    """Time derivative of the flat state ``x`` (shape ``(..., 4n)``)."""
    n = flow.shape[0]
    s, xa, xs, k = x[..., :n], x[..., n:2 * n], x[..., 2 * n:3 * n], x[..., 3 * n:]
    qa, qs = q[..., :n], q[..., n:]
    new_inf = s * infection_force_array(xa, xs, beta, flow)
    ds = -new_inf
    dxa = new_inf - (params.eps + params.r_a + qa) * xa
    dxs = params.eps * xa - (params.r_s + qs) * xs
    dk = qa * xa + qs * xs - params.r_q * k
    return np.concatenate([ds, dxa, dxs, dk], axis=-1)


def rhs_vjp(x, q, beta, flow, params: EpiParams, ct):
    """Cotangent pullback of :func:`rhs_array` at ``(x, q)``: returns ``(ct @ df/dx, ct @ df/dq)``.

    ``x`` and ``q`` are single points; ``ct`` may carry leading batch axes.
    """
    n = flow.shape[0]
    s, xa, xs = x[:n], x[n:2 * n], x[2 * n:3 * n]
    qa, qs = q[:n], q[n:]
    cs, ca, cy, ck = ct[..., :n], ct[..., n:2 * n], ct[..., 2 * n:3 * n], ct[..., 3 * n:]
    force = infection_force_array(xa, xs, beta, flow)
    gain = ca - cs
    back = (gain * s) @ flow
    vx = np.concatenate([
        gain * force,
        beta[0] * back - (params.eps + params.r_a + qa) * ca + params.eps * cy + qa * ck,
        beta[1] * back - (params.r_s + qs) * cy + qs * ck,
        -params.r_q * ck,
    ], axis=-1)
    vq = np.concatenate([xa * (ck - ca), xs * (ck - cy)], axis=-1)
    return vx, vq


def infection_force(state: EpiState, model: NetworkModel, beta: TransmissionRate) -> np.ndarray:
    _check_dims(model.n, state.xa, state.xs)
    return infection_force_array(state.xa, state.xs, beta.as_array(), model.flow)


def vector_field(state: EpiState, control: ControlVector, beta: TransmissionRate,
                 model: NetworkModel) -> EpiState:
    _check_dims(model.n, state.s, control.qa)
    dx = rhs_array(state.as_array(), control.as_array(), beta.as_array(), model.flow, model.params)
    return EpiState.from_array(dx)


# --------------------------------------------------------------------------
# CSV loaders


def _parse_float(text: str, where: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ContractError(f"{where}: not a number: {text!r}") from None
    if not math.isfinite(value):
        raise ContractError(f"{where}: non-finite value {text!r}")
    if value < 0:
        raise ContractError(f"{where}: negative value {value}")
    return value


def load_populations(path) -> tuple[list[str], np.ndarray]:
    """Read ``node_id,population`` rows (header required)."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != ["node_id", "population"]:
        raise ContractError(f"{path}: expected header 'node_id,population'")
    ids, pops = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 2:
            raise ContractError(f"{path}:{lineno}: expected 2 columns, got {len(row)}")
        ids.append(row[0].strip())
        pops.append(_parse_float(row[1], f"{path}:{lineno}"))
    if not ids:
        raise ContractError(f"{path}: no data rows")
    return ids, np.array(pops)


def load_flow(path) -> tuple[list[str], np.ndarray]:
    """Read a dense row-major flow matrix whose header row lists node ids."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ContractError(f"{path}: empty file")
    ids = [c.strip() for c in rows[0]]
    n = len(ids)
    data = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != n:
            raise ContractError(f"{path}:{lineno}: ragged row ({len(row)} columns, expected {n})")
        data.append([_parse_float(c, f"{path}:{lineno}") for c in row])
    if len(data) != n:
        raise ContractError(f"{path}: expected {n} data rows, got {len(data)}")
    return ids, np.array(data)


def load_network(populations_csv, flow_csv, params: EpiParams) -> NetworkModel:
    pop_ids, pops = load_populations(populations_csv)
    flow_ids, flow = load_flow(flow_csv)
    if pop_ids != flow_ids:
        raise ContractError("node ids differ between populations and flow files")
    return NetworkModel(pops, flow, params)


def write_network(model: NetworkModel, populations_csv, flow_csv, ids: Sequence[str] | None = None):
    ids = list(ids) if ids is not None else [f"n{i + 1}" for i in range(model.n)]
    with Path(populations_csv).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node_id", "population"])
        for i, p in zip(ids, model.populations):
            w.writerow([i, repr(float(p))])
    with Path(flow_csv).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ids)
        for row in model.flow:
            w.writerow([repr(float(v)) for v in row])
