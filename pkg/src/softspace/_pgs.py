"""Projected Gauss-Seidel kernels for the staggered contact solve.

Unknowns are ordered ``[f_n (nc), f_t (nc * nt)]`` in local contact frames.
Contact-space velocities are ``w = b + dt * J u`` with ``u = A^-1 J^T f``;
``u`` is updated incrementally so each row update costs O(M).

Individual forces are not unique when there are more contact rows than
modes, but the generalized force ``J^T f`` is, so convergence is judged on it.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _w(J, b, u, dt, i):
    acc = 0.0
    for k in range(u.shape[0]):
        acc += J[i, k] * u[k]
    return b[i] + dt * acc


@njit(cache=True)
def _apply(G, u, i, df):
    for k in range(u.shape[0]):
        u[k] += G[k, i] * df


@njit(cache=True)
def _normal_sweeps(J, G, diag, b, dt, f, u, nc, max_sweeps, vtol):
    for _ in range(max_sweeps):
        delta = 0.0
        for i in range(nc):
            wi = _w(J, b, u, dt, i)
            new = f[i] - wi / diag[i]
            if new < 0.0:
                new = 0.0
            df = new - f[i]
            if df != 0.0:
                _apply(G, u, i, df)
                f[i] = new
                dv = abs(df) * diag[i]
                if dv > delta:
                    delta = dv
        if delta <= vtol:
            break


@njit(cache=True)
def _friction_sweeps(J, G, W, b, dt, f, u, nc, nt, mu, max_sweeps, vtol):
    wt = np.zeros(nt)
    ft = np.zeros(nt)
    for _ in range(max_sweeps):
        delta = 0.0
        for i in range(nc):
            base = nc + i * nt
            for k in range(nt):
                wt[k] = _w(J, b, u, dt, base + k)
            if nt == 1:
                ft[0] = f[base] - wt[0] / W[base, base]
            else:
                a = W[base, base]
                c = W[base, base + 1]
                e = W[base + 1, base + 1]
                det = a * e - c * c
                if det > 1e-14 * a * e:
                    ft[0] = f[base] - (e * wt[0] - c * wt[1]) / det
                    ft[1] = f[base + 1] - (-c * wt[0] + a * wt[1]) / det
                else:
                    ft[0] = f[base] - wt[0] / a
                    ft[1] = f[base + 1] - wt[1] / e
            limit = mu * f[i]
            norm = 0.0
            for k in range(nt):
                norm += ft[k] * ft[k]
            norm = np.sqrt(norm)
            if norm > limit:
                s = limit / norm if norm > 0.0 else 0.0
                for k in range(nt):
                    ft[k] *= s
            for k in range(nt):
                df = ft[k] - f[base + k]
                if df != 0.0:
                    _apply(G, u, base + k, df)
                    f[base + k] = ft[k]
                    dv = abs(df) * W[base + k, base + k]
                    if dv > delta:
                        delta = dv
        if delta <= vtol:
            break


@njit(cache=True)
def _clip_cone(f, nc, nt, mu):
    for i in range(nc):
        base = nc + i * nt
        norm = 0.0
        for k in range(nt):
            norm += f[base + k] * f[base + k]
        norm = np.sqrt(norm)
        limit = mu * f[i]
        if norm > limit:
            s = limit / norm if norm > 0.0 else 0.0
            for k in range(nt):
                f[base + k] *= s


@njit(cache=True)
def staggered_projection(J, G, b, f0, dt, nc, nt, mu, max_outer, outer_tol, max_sweeps, sweep_tol):
    """Alternate a normal PGS solve and a friction PGS solve.

    ``J`` (m, M) are contact rows, ``G = A^-1 J^T`` (M, m), ``b`` the
    contact-free velocities, ``f0`` the warm start.  Stops when the generalized force ``J^T f``
    changes by less than ``outer_tol`` (relative) between passes.
    Returns (f, converged, outer_iterations).
    """
    m = J.shape[0]
    M = J.shape[1]
    W = dt * (J @ G)
    diag = np.empty(m)
    for i in range(m):
        diag[i] = W[i, i]
    vscale = 1e-30
    for i in range(m):
        if abs(b[i]) > vscale:
            vscale = abs(b[i])
    vtol = sweep_tol * vscale
    f = f0.copy()
    _clip_cone(f, nc, nt, mu)
    u = G @ f
    r = np.zeros(M)
    r_old = J.T @ f
    converged = False
    it = 0
    for it in range(1, max_outer + 1):
        _normal_sweeps(J, G, diag, b, dt, f, u, nc, max_sweeps, vtol)
        if mu > 0.0:
            _friction_sweeps(J, G, W, b, dt, f, u, nc, nt, mu, max_sweeps, vtol)
        change = 0.0
        scale = 1e-30
        for k in range(M):
            acc = 0.0
            for j in range(m):
                acc += J[j, k] * f[j]
            r[k] = acc
            d = abs(acc - r_old[k])
            if d > change:
                change = d
            if abs(acc) > scale:
                scale = abs(acc)
            r_old[k] = acc
        if change <= outer_tol * scale:
            converged = True
            break
    # final normal pass so complementarity holds for the returned friction forces
    _normal_sweeps(J, G, diag, b, dt, f, u, nc, max_sweeps, vtol)
    _clip_cone(f, nc, nt, mu)
    return f, converged, it
