"""Augmented-Lagrangian solver with a projected-gradient inner loop.

Solves ``min f(z)`` s.t. ``c(z) <= 0`` and ``z`` in a closed convex set given
by its Euclidean projection. Inequalities are handled with the
Powell-Hestenes-Rockafellar augmented Lagrangian; the bound-constrained
subproblems use spectral projected gradient (Barzilai-Borwein steps with a
nonmonotone Armijo search).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np


def _antitonic_bounded(y, lo, hi):
    """Nonincreasing least-squares fit of ``y`` with per-entry bounds ``lo <= u <= hi``.

    Pool-adjacent-violators for separable convex losses: a pooled block takes
    the clipped mean of its members. Requires nonincreasing ``lo`` and ``hi``,
    which also guarantees that no pooled block has an empty bound interval.
    """
    sums, counts, lows, highs, vals = [], [], [], [], []
    for j in range(len(y)):
        sums.append(y[j])
        counts.append(1)
        lows.append(lo[j])
        highs.append(hi[j])
        vals.append(min(max(y[j], lo[j]), hi[j]))
        while len(vals) > 1 and vals[-2] < vals[-1]:
            s, c, h = sums.pop(), counts.pop(), highs.pop()
            lows.pop()
            vals.pop()
            sums[-1] += s
            counts[-1] += c
            highs[-1] = h
            vals[-1] = min(max(sums[-1] / counts[-1], lows[-1]), highs[-1])
    return np.repeat(vals, counts)


def project_rate_box(z, upper: float, rate: float = 0.0, prev=None) -> np.ndarray:
    """Euclidean projection of a control plan onto box and one-sided rate limits.

    ``z`` has shape ``(H, m)``; each column is a time series constrained by
    ``0 <= q_j <= upper``, ``q_j - q_{j-1} <= rate`` and, when ``prev`` is
    given, ``q_0 <= prev + rate``. ``rate <= 0`` disables the rate limits.

    With ``u_j = q_j - j*rate`` the rate limit reads "u nonincreasing" and the
    box turns into nonincreasing bounds (after a running minimum on the upper
    bound, which leaves the feasible set unchanged).
    """
    z = np.asarray(z, dtype=float)
    if rate <= 0:
        return np.clip(z, 0.0, upper)
    horizon, width = z.shape
    ramp = rate * np.arange(horizon)[:, None]
    lo = np.broadcast_to(-ramp, (horizon, width))
    hi = np.broadcast_to(upper - ramp, (horizon, width)).copy()
    if prev is not None:
        hi[0] = np.minimum(hi[0], np.asarray(prev, dtype=float) + rate)
    hi = np.minimum.accumulate(hi, axis=0)
    u = z - ramp
    out = np.empty_like(u)
    for c in range(width):
        out[:, c] = _antitonic_bounded(u[:, c].tolist(), lo[:, c].tolist(), hi[:, c].tolist())
    return out + ramp


def rate_box_violation(q, upper: float, rate: float = 0.0, prev=None) -> float:
    """Largest violation of the box/rate constraints for a plan ``q`` (``H x m``)."""
    q = np.asarray(q, dtype=float)
    viol = max(0.0, float(-q.min()), float(q.max() - upper))
    if rate > 0:
        if q.shape[0] > 1:
            viol = max(viol, float(np.max(np.diff(q, axis=0) - rate)))
        if prev is not None:
            viol = max(viol, float(np.max(q[0] - np.asarray(prev) - rate)))
    return viol


@dataclass
class SolveInfo:
    outer: int = 0
    inner: int = 0
    evals: int = 0
    grads: int = 0
    max_violation: float = np.inf
    stationarity: float = np.inf
    converged: bool = False
    multipliers: Optional[np.ndarray] = None
    history: list = field(default_factory=list)


def spg(fun: Callable, fun_grad: Callable, project: Callable, x0, max_iter: int = 200,
        tol: float = 1e-8, memory: int = 5, info: Optional[SolveInfo] = None):
    """Spectral projected gradient for ``min fun(x)`` over a convex set.

    ``fun_grad(x)`` returns ``(value, gradient)``. Returns ``(x, value, pg)``
    with ``pg`` the projected-gradient norm ``||P(x - g) - x||_inf`` at exit.
    """
    x = project(x0)
    f, g = fun_grad(x)
    if info is not None:
        info.grads += 1
    hist = [f]
    pg = np.abs(project(x - g) - x).max()
    gamma = 1.0 / max(pg, 1e-12)
    gamma_min, gamma_max = 1e-10, 1e10
    for _ in range(max_iter):
        if pg <= tol:
            break
        d = project(x - gamma * g) - x
        gd = float(np.sum(g * d))
        if gd >= 0:
            break
        f_ref = max(hist[-memory:])
        t = 1.0
        while True:
            x_try = x + t * d
            f_try = fun(x_try)
            if info is not None:
                info.evals += 1
            if f_try <= f_ref + 1e-4 * t * gd:
                break
            # safeguarded quadratic interpolation
            t_new = -0.5 * gd * t * t / (f_try - f - t * gd) if f_try - f - t * gd > 0 else 0.5 * t
            t = min(max(t_new, 0.1 * t), 0.5 * t)
            if t < 1e-12:
                return x, f, pg
        f_new, g_new = fun_grad(x_try)
        if info is not None:
            info.grads += 1
            info.inner += 1
        s = x_try - x
        y = g_new - g
        sy = float(np.sum(s * y))
        gamma = float(np.sum(s * s)) / sy if sy > 0 else gamma_max
        gamma = min(max(gamma, gamma_min), gamma_max)
        x, f, g = x_try, f_new, g_new
        hist.append(f)
        pg = np.abs(project(x - g) - x).max()
    return x, f, pg


def augmented_lagrangian(objective: Callable, constraints: Callable, project: Callable, x0,
                         multipliers=None, max_outer: int = 20, max_inner: int = 100,
                         penalty_init: float = 10.0, penalty_growth: float = 10.0,
                         tol: float = 1e-8, ctol: float = 1e-9, penalty_max: float = 1e8):
    """Minimise ``objective`` subject to ``constraints(x) <= 0`` and ``x = project(x)``.

    Parameters
    ----------
    objective : callable
        ``objective(x, grad=False)`` returns the value, or ``(value, gradient)``
        when ``grad`` is true.
    constraints : callable
        ``constraints(x, grad=False)`` returns the vector ``c`` (feasible when
        ``c <= 0``), or ``(c, jacobian)`` with the jacobian shaped
        ``(len(c),) + x.shape``. The jacobian may instead be a callable
        ``vjp(weights)`` returning ``sum_i weights_i * grad c_i``.
    project : callable
        Euclidean projection onto the simple convex set.
    multipliers : array_like, optional
        Initial multiplier estimates (e.g. shifted from a previous solve).

    Returns
    -------
    x : ndarray
    info : SolveInfo
    """
    info = SolveInfo()
    x = project(np.asarray(x0, dtype=float))
    c0 = np.atleast_1d(constraints(x))
    mu = np.zeros_like(c0) if multipliers is None else np.maximum(np.asarray(multipliers, float), 0.0)
    rho = penalty_init
    prev_viol = np.inf

    def make(mu_k, rho_k):
        def lag(z):
            f = objective(z)
            c = np.atleast_1d(constraints(z))
            shifted = np.maximum(0.0, mu_k + rho_k * c)
            return f + float(np.sum(shifted ** 2 - mu_k ** 2)) / (2 * rho_k)

        def lag_grad(z):
            f, g = objective(z, grad=True)
            c, jac = constraints(z, grad=True)
            c = np.atleast_1d(c)
            shifted = np.maximum(0.0, mu_k + rho_k * c)
            val = f + float(np.sum(shifted ** 2 - mu_k ** 2)) / (2 * rho_k)
            pull = jac(shifted) if callable(jac) else np.tensordot(shifted, jac, axes=1)
            return val, g + pull

        return lag, lag_grad

    for outer in range(1, max_outer + 1):
        info.outer = outer
        lag, lag_grad = make(mu, rho)
        # inexact early subproblems, exact once the multipliers settle
        inner_tol = max(tol, 10.0 ** -(outer + 1))
        x, _, pg = spg(lag, lag_grad, project, x, max_inner, inner_tol, info=info)
        c = np.atleast_1d(constraints(x))
        viol = float(max(0.0, c.max()))
        mu = np.maximum(0.0, mu + rho * c)
        info.history.append((outer, viol, pg, rho))
        info.max_violation, info.stationarity = viol, pg
        if viol <= ctol and pg <= tol:
            info.converged = True
            break
        if viol > 0.1 * prev_viol:
            rho = min(rho * penalty_growth, penalty_max)
        prev_viol = viol
    info.multipliers = mu
    return x, info
