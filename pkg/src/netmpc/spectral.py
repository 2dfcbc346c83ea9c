"""Infected-subsystem matrix and Perron data for irreducible Metzler matrices.

The spectral abscissa of an irreducible Metzler matrix is its Perron root. It
is computed by power iteration on a nonnegative matrix: either the plain shift
``M + cI`` or, by default, the resolvent ``(mu I - M)^{-1}`` with ``mu`` set to
the current Collatz-Wielandt upper bound (Noda's iteration). Both keep the
iterate strictly positive, so every step brackets the root by

    min_i (M x)_i / x_i  <=  lambda_max  <=  max_i (M x)_i / x_i

and the loop stops on the width of that bracket rather than on a heuristic.
Reducible inputs are split into strongly connected blocks; the abscissa is the
largest block abscissa and no Perron vector is reported.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .errors import ContractError, IrreducibilityError, SpectralConvergenceError
from .netmodel import ControlVector, EpiParams, NetworkModel, TransmissionRate

MAX_ITER = 100_000
STALL_LIMIT = 200
METZLER_TOL = 0.0


@dataclass(frozen=True, eq=False)
class InfectedMatrix:
    m: np.ndarray
    n: int
    provenance: tuple = ()

    def __post_init__(self):
        m = np.array(self.m, dtype=float)
        m.setflags(write=False)
        object.__setattr__(self, "m", m)
        if m.shape != (2 * self.n, 2 * self.n):
            raise ContractError(f"infected matrix must be {2 * self.n}x{2 * self.n}, got {m.shape}")


@dataclass(frozen=True, eq=False)
class SpectralResult:
    lambda_max: float
    left_vec: Optional[np.ndarray]
    iterations: int
    right_vec: Optional[np.ndarray] = None
    irreducible: bool = False

    def derivative(self) -> np.ndarray:
        """Gradient of the simple Perron root w.r.t. the matrix entries, ``v u^T / v^T u``."""
        if self.left_vec is None or self.right_vec is None:
            raise IrreducibilityError("eigenvalue derivative needs both Perron vectors")
        v, u = self.left_vec, self.right_vec
        return np.outer(v, u) / (v @ u)


def infected_matrix_array(s, q, beta, flow, params: EpiParams) -> np.ndarray:
    """Dense ``2n x 2n`` matrix of the infected subsystem ``dy/dt = M y``."""
    s = np.asarray(s, dtype=float)
    q = np.asarray(q, dtype=float)
    n = flow.shape[0]
    ba, bs = float(beta[0]), float(beta[1])
    sa = s[:, None] * flow
    m = np.empty((2 * n, 2 * n))
    m[:n, :n] = ba * sa
    m[:n, n:] = bs * sa
    m[n:, :n] = params.eps * np.eye(n)
    m[n:, n:] = 0.0
    idx = np.arange(n)
    m[idx, idx] -= params.eps + params.r_a + q[:n]
    m[n + idx, n + idx] = -(params.r_s + q[n:])
    return m


def build_infected_matrix(s, control: ControlVector, beta: TransmissionRate,
                          model: NetworkModel) -> InfectedMatrix:
    s = np.asarray(s, dtype=float)
    if s.shape != (model.n,) or control.n != model.n:
        raise ContractError(f"dimension mismatch: model has n={model.n}")
    if s.min() < 0 or s.max() > 1:
        raise ContractError("susceptible proportions must lie in [0, 1]")
    m = infected_matrix_array(s, control.as_array(), beta.as_array(), model.flow, model.params)
    return InfectedMatrix(m, model.n, (s.copy(), control, beta))


def _as_array(m) -> np.ndarray:
    arr = m.m if isinstance(m, InfectedMatrix) else np.asarray(m, dtype=float)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ContractError(f"expected a square matrix, got shape {arr.shape}")
    return arr


def _check_metzler(m: np.ndarray) -> None:
    off = m - np.diag(np.diag(m))
    if off.min() < -METZLER_TOL:
        raise ContractError("matrix is not Metzler (negative off-diagonal entry)")
    if not np.all(np.isfinite(m)):
        raise ContractError("matrix has non-finite entries")


def strong_components(m: np.ndarray) -> tuple[int, np.ndarray]:
    pattern = m > 0
    np.fill_diagonal(pattern, False)
    if m.shape[0] == 1:
        return 1, np.zeros(1, dtype=int)
    return connected_components(csr_matrix(pattern), directed=True, connection="strong")


def perron_root(m: np.ndarray, x0=None, method: str = "noda", tol: Optional[float] = None,
                max_iter: int = MAX_ITER) -> tuple[float, np.ndarray, int]:
    """Perron root and positive right eigenvector (1-norm one) of an irreducible Metzler matrix.

    Parameters
    ----------
    m : ndarray
        Irreducible Metzler matrix; irreducibility is the caller's promise.
    x0 : ndarray, optional
        Positive starting vector, e.g. the eigenvector of a nearby matrix.
    method : {"noda", "power"}
        Resolvent (shift-and-invert) or plain shifted power iteration.
    tol : float, optional
        Target width of the Collatz-Wielandt bracket. Defaults to
        ``1e-13 * max(1, ||m||_inf)`` for ``"noda"`` and ``1e-10`` scaled the
        same way for ``"power"``.
    """
    size = m.shape[0]
    scale = max(1.0, float(np.abs(m).sum(axis=1).max()))
    if tol is None:
        tol = (1e-13 if method == "noda" else 1e-10) * scale
    if size == 1:
        return float(m[0, 0]), np.ones(1), 0
    if x0 is None or np.any(~(np.asarray(x0) > 0)):
        x = np.full(size, 1.0 / size)
    else:
        x = np.asarray(x0, dtype=float) / np.sum(x0)
    shift = max(0.0, float(-np.diag(m).min())) + 1.0
    eye = np.eye(size)
    best_gap = floor_gap = np.inf
    stall = idle = 0
    for it in range(1, max_iter + 1):
        y = m @ x
        ratios = y / x
        lo, hi = float(ratios.min()), float(ratios.max())
        gap = hi - lo
        if gap <= tol:
            return float(y.sum() / x.sum()), x, it
        # Rounding in the ratios of tiny components can floor the gap above
        # tol; stop once the bracket stops shrinking and is already tight.
        if gap < floor_gap:
            floor_gap, idle = gap, 0
        else:
            idle += 1
            if idle >= STALL_LIMIT:
                break
        if gap < best_gap * (1 - 1e-3):
            best_gap, stall = gap, 0
        else:
            stall += 1
            if stall >= 5 and gap <= 1e-9 * scale:
                return float(y.sum() / x.sum()), x, it
        z = None
        if method == "noda":
            try:
                z = np.linalg.solve(hi * eye - m, x)
            except np.linalg.LinAlgError:
                return float(y.sum() / x.sum()), x, it
            with np.errstate(invalid="ignore", divide="ignore"):
                z = z / z.sum()
            if not np.all(np.isfinite(z)) or np.any(z <= 0):
                z = None
        if z is None:
            z = y + shift * x
            z = z / z.sum()
        x = z
    raise SpectralConvergenceError(
        f"Perron iteration did not converge after {it} iterations (bracket width {gap:.3e})"
    )


def _guarded_root(arr, x0, method):
    """Perron root, or ``(LAPACK abscissa, None, 0)`` when the iteration stalls.

    Stalls happen for patterns that are irreducible in name only, e.g.
    couplings built from subnormal susceptible fractions.
    """
    try:
        return perron_root(arr, x0, method)
    except SpectralConvergenceError:
        return float(np.linalg.eigvals(arr).real.max()), None, 0


def spectral_abscissa(m, method: str = "noda", left0=None, right0=None,
                      irreducible: Optional[bool] = None, vectors: bool = True) -> SpectralResult:
    """Spectral abscissa of a Metzler matrix, with Perron vectors when irreducible.

    ``irreducible`` may be passed by callers that already know the pattern
    (e.g. strongly connected flow and all ``s_i > 0``) to skip the graph check.
    """
    arr = _as_array(m)
    _check_metzler(arr)
    if irreducible is None:
        ncomp, labels = strong_components(arr)
        irreducible = ncomp == 1
    else:
        ncomp, labels = (1, None) if irreducible else strong_components(arr)
    if irreducible:
        lam_r, right, it_r = _guarded_root(arr, right0, method)
        if right is None:
            return SpectralResult(lam_r, None, it_r)
        if not vectors:
            return SpectralResult(lam_r, None, it_r, right, True)
        lam_l, left, it_l = _guarded_root(arr.T, left0, method)
        if left is None:
            return SpectralResult(lam_r, None, it_r, right, True)
        return SpectralResult(0.5 * (lam_r + lam_l), left, it_r + it_l, right, True)
    lam = -np.inf
    iters = 0
    for c in range(ncomp):
        idx = np.flatnonzero(labels == c)
        sub = arr[np.ix_(idx, idx)]
        val, _, it = _guarded_root(sub, None, method)
        lam = max(lam, val)
        iters += it
    return SpectralResult(float(lam), None, iters, None)


def irreducible_hint(s, model: NetworkModel) -> bool:
    """Sufficient pattern test for irreducibility of ``M(s, q | beta)``.

    With a strongly connected flow matrix, ``eps > 0`` and every ``s_i > 0``
    each symptomatic node feeds some asymptomatic node and vice versa.
    """
    s = np.asarray(s)
    if s.min() <= 0:
        return False
    if model.n == 1:
        return bool(model.flow[0, 0] > 0)
    return model.strongly_connected


def perron_left_vector(m, method: str = "noda") -> np.ndarray:
    """Positive left Perron vector ``v`` (``v^T M = lambda_max v^T``, ``||v||_1 = 1``)."""
    arr = _as_array(m)
    _check_metzler(arr)
    ncomp, _ = strong_components(arr)
    if ncomp != 1:
        raise IrreducibilityError("perron_left_vector requires an irreducible matrix")
    _, left, _ = perron_root(arr.T, None, method)
    return left


def matrix_leq(a, b, tol: float = 1e-12) -> bool:
    """Entrywise ``a <= b`` up to ``tol``."""
    a_arr, b_arr = _as_array(a), _as_array(b)
    if a_arr.shape != b_arr.shape:
        raise ContractError(f"dimension mismatch: {a_arr.shape} vs {b_arr.shape}")
    return bool(np.all(a_arr <= b_arr + tol))
