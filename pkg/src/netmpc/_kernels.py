"""Compiled RK4 kernels for the SIQR flow (forward, stage recording and adjoint).

Status codes returned by the forward kernels: 0 ok, 1 non-finite state,
2 state left ``[0, 1]``, 3 a susceptible fraction increased.
"""

import numpy as np
from numba import njit

NEG_TOL = 1e-14
UPPER_TOL = 1e-12


@njit(cache=True)
def rhs(x, q, ba, bs, flow, eps, ra, rs, rq, out):
    n = flow.shape[0]
    for i in range(n):
        force = 0.0
        for j in range(n):
            force += flow[i, j] * (ba * x[n + j] + bs * x[2 * n + j])
        new = x[i] * force
        xa, xs = x[n + i], x[2 * n + i]
        qa, qs = q[i], q[n + i]
        out[i] = -new
        out[n + i] = new - (eps + ra + qa) * xa
        out[2 * n + i] = eps * xa - (rs + qs) * xs
        out[3 * n + i] = qa * xa + qs * xs - rq * x[3 * n + i]


@njit(cache=True)
def _check(x_old, x_new, n):
    for i in range(x_new.shape[0]):
        v = x_new[i]
        if not np.isfinite(v):
            return 1
        if v < -NEG_TOL or v > 1.0 + UPPER_TOL:
            return 2
    for i in range(n):
        if x_new[i] > x_old[i]:
            return 3
    return 0


@njit(cache=True)
def rk4_interval(x0, q, ba, bs, flow, eps, ra, rs, rq, dt, substeps, check, stages, record):
    """Advance ``x0`` over ``dt``; writes stage points into ``stages`` when ``record``."""
    n = flow.shape[0]
    size = x0.shape[0]
    h = dt / substeps
    x = x0.copy()
    k1 = np.empty(size)
    k2 = np.empty(size)
    k3 = np.empty(size)
    k4 = np.empty(size)
    tmp = np.empty(size)
    x_new = np.empty(size)
    for step in range(substeps):
        if record:
            stages[step, 0, :] = x
        rhs(x, q, ba, bs, flow, eps, ra, rs, rq, k1)
        for i in range(size):
            tmp[i] = x[i] + 0.5 * h * k1[i]
        if record:
            stages[step, 1, :] = tmp
        rhs(tmp, q, ba, bs, flow, eps, ra, rs, rq, k2)
        for i in range(size):
            tmp[i] = x[i] + 0.5 * h * k2[i]
        if record:
            stages[step, 2, :] = tmp
        rhs(tmp, q, ba, bs, flow, eps, ra, rs, rq, k3)
        for i in range(size):
            tmp[i] = x[i] + h * k3[i]
        if record:
            stages[step, 3, :] = tmp
        rhs(tmp, q, ba, bs, flow, eps, ra, rs, rq, k4)
        for i in range(size):
            x_new[i] = x[i] + (h / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
        if check:
            status = _check(x, x_new, n)
            if status != 0:
                return x_new, status
        x[:] = x_new
    return x, 0


@njit(cache=True)
def rollout(x0, controls, betas, flow, eps, ra, rs, rq, dt, substeps, check):
    """Trajectory ``(H + 1, 4n)`` under piecewise-constant inputs; returns ``(traj, status)``."""
    horizon = controls.shape[0]
    traj = np.empty((horizon + 1, x0.shape[0]))
    traj[0] = x0
    dummy = np.empty((0, 4, x0.shape[0]))
    x = x0
    for j in range(horizon):
        x, status = rk4_interval(x, controls[j], betas[j, 0], betas[j, 1], flow, eps, ra, rs, rq,
                                 dt, substeps, check, dummy, False)
        if status != 0:
            return traj, status
        traj[j + 1] = x
    return traj, 0


@njit(cache=True)
def rollout_batch(x0, controls, betas, flow, eps, ra, rs, rq, dt, substeps, check):
    """Batched :func:`rollout` over ``controls`` of shape ``(B, H, 2n)`` with one start state."""
    batch, horizon = controls.shape[0], controls.shape[1]
    out = np.empty((batch, horizon + 1, x0.shape[0]))
    for b in range(batch):
        traj, status = rollout(x0, controls[b], betas, flow, eps, ra, rs, rq, dt, substeps, check)
        if status != 0:
            return out, status
        out[b] = traj
    return out, 0


@njit(cache=True)
def rollout_stages(x0, controls, betas, flow, eps, ra, rs, rq, dt, substeps):
    """Checked rollout that also records every RK4 stage point, shape ``(H, substeps, 4, 4n)``."""
    horizon = controls.shape[0]
    size = x0.shape[0]
    traj = np.empty((horizon + 1, size))
    stages = np.empty((horizon, substeps, 4, size))
    traj[0] = x0
    x = x0
    for j in range(horizon):
        x, status = rk4_interval(x, controls[j], betas[j, 0], betas[j, 1], flow, eps, ra, rs, rq,
                                 dt, substeps, True, stages[j], True)
        if status != 0:
            return traj, stages, status
        traj[j + 1] = x
    return traj, stages, 0


@njit(cache=True)
def rhs_vjp(x, q, ba, bs, flow, eps, ra, rs, rq, ct, vx, vq):
    """``vx = ct @ df/dx`` and ``vq = ct @ df/dq`` at the point ``(x, q)``."""
    n = flow.shape[0]
    back = np.zeros(n)
    force = np.empty(n)
    for i in range(n):
        f = 0.0
        for j in range(n):
            f += flow[i, j] * (ba * x[n + j] + bs * x[2 * n + j])
        force[i] = f
        gain = ct[n + i] - ct[i]
        c = gain * x[i]
        for j in range(n):
            back[j] += c * flow[i, j]
    for i in range(n):
        gain = ct[n + i] - ct[i]
        ca, cy, ck = ct[n + i], ct[2 * n + i], ct[3 * n + i]
        qa, qs = q[i], q[n + i]
        vx[i] = gain * force[i]
        vx[n + i] = ba * back[i] - (eps + ra + qa) * ca + eps * cy + qa * ck
        vx[2 * n + i] = bs * back[i] - (rs + qs) * cy + qs * ck
        vx[3 * n + i] = -rq * ck
        vq[i] = x[n + i] * (ck - ca)
        vq[n + i] = x[2 * n + i] * (ck - cy)


@njit(cache=True)
def rk4_vjp(stages, q, ba, bs, flow, eps, ra, rs, rq, dt, ct):
    """Pull cotangents ``ct`` (shape ``(B, 4n)``) back through one recorded RK4 interval."""
    batch, size = ct.shape
    m = q.shape[0]
    substeps = stages.shape[0]
    h = dt / substeps
    ax = ct.copy()
    aq = np.zeros((batch, m))
    g = np.empty(size)
    vx = np.empty(size)
    vq = np.empty(m)
    acc = np.empty(size)
    for b in range(batch):
        a = ax[b]
        for step in range(substeps - 1, -1, -1):
            for i in range(size):
                g[i] = (h / 6.0) * a[i]
            rhs_vjp(stages[step, 3], q, ba, bs, flow, eps, ra, rs, rq, g, vx, vq)
            for i in range(size):
                acc[i] = a[i] + vx[i]
                g[i] = (h / 3.0) * a[i] + h * vx[i]
            for i in range(m):
                aq[b, i] += vq[i]
            rhs_vjp(stages[step, 2], q, ba, bs, flow, eps, ra, rs, rq, g, vx, vq)
            for i in range(size):
                acc[i] += vx[i]
                g[i] = (h / 3.0) * a[i] + 0.5 * h * vx[i]
            for i in range(m):
                aq[b, i] += vq[i]
            rhs_vjp(stages[step, 1], q, ba, bs, flow, eps, ra, rs, rq, g, vx, vq)
            for i in range(size):
                acc[i] += vx[i]
                g[i] = (h / 6.0) * a[i] + 0.5 * h * vx[i]
            for i in range(m):
                aq[b, i] += vq[i]
            rhs_vjp(stages[step, 0], q, ba, bs, flow, eps, ra, rs, rq, g, vx, vq)
            for i in range(size):
                a[i] = acc[i] + vx[i]
            for i in range(m):
                aq[b, i] += vq[i]
    return ax, aq


@njit(cache=True)
def pullback(stages, controls, betas, flow, eps, ra, rs, rq, dt, seeds):
    """Plan gradients of ``sum_j seeds[:, j] . x_j``; ``seeds`` is ``(B, H + 1, 4n)``."""
    batch, horizon = seeds.shape[0], controls.shape[0]
    grad = np.empty((batch, horizon, controls.shape[1]))
    adj = seeds[:, horizon, :].copy()
    for j in range(horizon - 1, -1, -1):
        adj, aq = rk4_vjp(stages[j], controls[j], betas[j, 0], betas[j, 1], flow, eps, ra, rs, rq, dt, adj)
        grad[:, j, :] = aq
        adj += seeds[:, j, :]
    return grad
