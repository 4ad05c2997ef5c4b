"""Compiled RK4 kernels for the oscillator chain.

State layout is ``x = [q_1..q_n, p_1..p_n]``.  Perturbation kinds per site:
0 none, 1 ``amp * sin q``, 2 ``amp * (1 - cos q)``.  Forcing is held constant
on each substep.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _dF(kind, amp, x):
    if kind == 1:
        return amp * np.cos(x)
    if kind == 2:
        return amp * np.sin(x)
    return 0.0


@njit(cache=True)
def _d2F(kind, amp, x):
    if kind == 1:
        return -amp * np.sin(x)
    if kind == 2:
        return amp * np.cos(x)
    return 0.0


@njit(cache=True)
def _rhs(x, zeta, a, b, kind, amp, damp, sites, out):
    n = a.shape[0]
    for i in range(n):
        q = x[i]
        g = 2.0 * a[i] * q + _dF(kind[i], amp[i], q)
        if i > 0:
            g += 2.0 * b[i - 1] * (q - x[i - 1])
        if i < n - 1:
            g += 2.0 * b[i] * (q - x[i + 1])
        out[i] = x[n + i]
        out[n + i] = -g - damp[i] * x[n + i]
    for j in range(sites.shape[0]):
        out[n + sites[j]] += zeta[j]


@njit(cache=True)
def _rk4_substep(x, zeta, h, a, b, kind, amp, damp, sites, k1, k2, k3, k4, tmp):
    m = x.shape[0]
    _rhs(x, zeta, a, b, kind, amp, damp, sites, k1)
    for i in range(m):
        tmp[i] = x[i] + 0.5 * h * k1[i]
    _rhs(tmp, zeta, a, b, kind, amp, damp, sites, k2)
    for i in range(m):
        tmp[i] = x[i] + 0.5 * h * k2[i]
    _rhs(tmp, zeta, a, b, kind, amp, damp, sites, k3)
    for i in range(m):
        tmp[i] = x[i] + h * k3[i]
    _rhs(tmp, zeta, a, b, kind, amp, damp, sites, k4)
    for i in range(m):
        x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])


@njit(cache=True)
def _rhs_block(x, zeta, a, b, kind, amp, damp, sites, out, nb):
    # batch-innermost variant of _rhs over the first nb columns
    n = a.shape[0]
    for i in range(n):
        for r in range(nb):
            q = x[i, r]
            if kind[i] == 1:
                g = amp[i] * np.cos(q)
            elif kind[i] == 2:
                g = amp[i] * np.sin(q)
            else:
                g = 0.0
            g += 2.0 * a[i] * q
            if i > 0:
                g += 2.0 * b[i - 1] * (q - x[i - 1, r])
            if i < n - 1:
                g += 2.0 * b[i] * (q - x[i + 1, r])
            out[i, r] = x[n + i, r]
            out[n + i, r] = -g - damp[i] * x[n + i, r]
    for j in range(sites.shape[0]):
        for r in range(nb):
            out[n + sites[j], r] += zeta[j, r]

@njit(cache=True)
def flow_batch(x0, coeffs, phi, h, a, b, kind, amp, damp, sites, block=64):
    """Time-one flow for a batch; forcing ``zeta_j = sum_l coeffs[., j, l] * phi[s, l]``.

    Trajectories are advanced in blocks with the batch index innermost so
    the stage loops vectorise.
    """
    B, m = x0.shape
    nsub, nbasis = phi.shape
    ns = sites.shape[0]
    out = np.empty_like(x0)
    x = np.empty((m, block)); k1 = np.empty((m, block)); k2 = np.empty((m, block))
    k3 = np.empty((m, block)); k4 = np.empty((m, block)); tmp = np.empty((m, block))
    zeta = np.empty((ns, block)); c = np.empty((ns, nbasis, block))
    for start in range(0, B, block):
        nb = min(block, B - start)
        for r in range(nb):
            for i in range(m):
                x[i, r] = x0[start + r, i]
            for j in range(ns):
                for l in range(nbasis):
                    c[j, l, r] = coeffs[start + r, j, l]
        for s in range(nsub):
            for j in range(ns):
                for r in range(nb):
                    zeta[j, r] = 0.0
                for l in range(nbasis):
                    p = phi[s, l]
                    for r in range(nb):
                        zeta[j, r] += c[j, l, r] * p
            _rhs_block(x, zeta, a, b, kind, amp, damp, sites, k1, nb)
            for i in range(m):
                for r in range(nb):
                    tmp[i, r] = x[i, r] + 0.5 * h * k1[i, r]
            _rhs_block(tmp, zeta, a, b, kind, amp, damp, sites, k2, nb)
            for i in range(m):
                for r in range(nb):
                    tmp[i, r] = x[i, r] + 0.5 * h * k2[i, r]
            _rhs_block(tmp, zeta, a, b, kind, amp, damp, sites, k3, nb)
            for i in range(m):
                for r in range(nb):
                    tmp[i, r] = x[i, r] + h * k3[i, r]
            _rhs_block(tmp, zeta, a, b, kind, amp, damp, sites, k4, nb)
            for i in range(m):
                for r in range(nb):
                    x[i, r] += h / 6.0 * (k1[i, r] + 2.0 * k2[i, r] + 2.0 * k3[i, r] + k4[i, r])
        for r in range(nb):
            for i in range(m):
                out[start + r, i] = x[i, r]
    return out


@njit(cache=True)
def flow_path(x0, path, h, a, b, kind, amp, damp, sites):
    """Integrate along an explicit forcing path ``path[s, j]``; returns all substep nodes."""
    nsub = path.shape[0]
    m = x0.shape[0]
    traj = np.empty((nsub + 1, m))
    x = x0.copy()
    traj[0] = x
    k1 = np.empty(m)
    k2 = np.empty(m)
    k3 = np.empty(m)
    k4 = np.empty(m)
    tmp = np.empty(m)
    for s in range(nsub):
        _rk4_substep(x, path[s], h, a, b, kind, amp, damp, sites, k1, k2, k3, k4, tmp)
        traj[s + 1] = x
    return traj


@njit(cache=True)
def _tangent_rhs_block(x, Y, a, b, kind, amp, damp, out, nb):
    # out = J(x) @ Y with J = [[0, I], [-Hess V(q), -diag(damp)]], batch innermost
    n = a.shape[0]
    cols = Y.shape[1]
    for i in range(n):
        for r in range(nb):
            q = x[i, r]
            if kind[i] == 1:
                d = -amp[i] * np.sin(q)
            elif kind[i] == 2:
                d = amp[i] * np.cos(q)
            else:
                d = 0.0
            d += 2.0 * a[i]
            if i > 0:
                d += 2.0 * b[i - 1]
            if i < n - 1:
                d += 2.0 * b[i]
            for c in range(cols):
                v = -d * Y[i, c, r] - damp[i] * Y[n + i, c, r]
                if i > 0:
                    v += 2.0 * b[i - 1] * Y[i - 1, c, r]
                if i < n - 1:
                    v += 2.0 * b[i] * Y[i + 1, c, r]
                out[i, c, r] = Y[n + i, c, r]
                out[n + i, c, r] = v


@njit(cache=True)
def flow_tangent_block(x0, coeffs, phi, h, a, b, kind, amp, damp, sites, block=32):
    """Time-one flow plus its exact discrete derivative.

    Returns ``(x1, jac)`` where ``jac[r]`` has columns ordered as
    ``[d/dx0 (m columns), d/dcoeffs (ns * nbasis columns, site-major)]``.
    """
    B, m = x0.shape
    nsub, nbasis = phi.shape
    ns = sites.shape[0]
    n = a.shape[0]
    cols = m + ns * nbasis
    out_x = np.empty_like(x0)
    out_j = np.empty((B, m, cols))
    x = np.empty((m, block))
    k1 = np.empty((m, block))
    k2 = np.empty((m, block))
    k3 = np.empty((m, block))
    k4 = np.empty((m, block))
    tmp = np.empty((m, block))
    zeta = np.empty((ns, block))
    c = np.empty((ns, nbasis, block))
    Y = np.empty((m, cols, block))
    T = np.empty((m, cols, block))
    D1 = np.empty((m, cols, block))
    D2 = np.empty((m, cols, block))
    D3 = np.empty((m, cols, block))
    D4 = np.empty((m, cols, block))
    for start in range(0, B, block):
        nb = min(block, B - start)
        for r in range(nb):
            for i in range(m):
                x[i, r] = x0[start + r, i]
            for j in range(ns):
                for l in range(nbasis):
                    c[j, l, r] = coeffs[start + r, j, l]
        Y[:, :, :] = 0.0
        for i in range(m):
            for r in range(nb):
                Y[i, i, r] = 1.0
        for s in range(nsub):
            for j in range(ns):
                for r in range(nb):
                    zeta[j, r] = 0.0
                for l in range(nbasis):
                    p = phi[s, l]
                    for r in range(nb):
                        zeta[j, r] += c[j, l, r] * p
            _rhs_block(x, zeta, a, b, kind, amp, damp, sites, k1, nb)
            _tangent_rhs_block(x, Y, a, b, kind, amp, damp, D1, nb)
            for j in range(ns):
                for l in range(nbasis):
                    for r in range(nb):
                        D1[n + sites[j], m + j * nbasis + l, r] += phi[s, l]
            for i in range(m):
                for r in range(nb):
                    tmp[i, r] = x[i, r] + 0.5 * h * k1[i, r]
                for cc in range(cols):
                    for r in range(nb):
                        T[i, cc, r] = Y[i, cc, r] + 0.5 * h * D1[i, cc, r]
            _rhs_block(tmp, zeta, a, b, kind, amp, damp, sites, k2, nb)
            _tangent_rhs_block(tmp, T, a, b, kind, amp, damp, D2, nb)
            for j in range(ns):
                for l in range(nbasis):
                    for r in range(nb):
                        D2[n + sites[j], m + j * nbasis + l, r] += phi[s, l]
            for i in range(m):
                for r in range(nb):
                    tmp[i, r] = x[i, r] + 0.5 * h * k2[i, r]
                for cc in range(cols):
                    for r in range(nb):
                        T[i, cc, r] = Y[i, cc, r] + 0.5 * h * D2[i, cc, r]
            _rhs_block(tmp, zeta, a, b, kind, amp, damp, sites, k3, nb)
            _tangent_rhs_block(tmp, T, a, b, kind, amp, damp, D3, nb)
            for j in range(ns):
                for l in range(nbasis):
                    for r in range(nb):
                        D3[n + sites[j], m + j * nbasis + l, r] += phi[s, l]
            for i in range(m):
                for r in range(nb):
                    tmp[i, r] = x[i, r] + h * k3[i, r]
                for cc in range(cols):
                    for r in range(nb):
                        T[i, cc, r] = Y[i, cc, r] + h * D3[i, cc, r]
            _rhs_block(tmp, zeta, a, b, kind, amp, damp, sites, k4, nb)
            _tangent_rhs_block(tmp, T, a, b, kind, amp, damp, D4, nb)
            for j in range(ns):
                for l in range(nbasis):
                    for r in range(nb):
                        D4[n + sites[j], m + j * nbasis + l, r] += phi[s, l]
            for i in range(m):
                for r in range(nb):
                    x[i, r] += h / 6.0 * (k1[i, r] + 2.0 * k2[i, r] + 2.0 * k3[i, r] + k4[i, r])
                for cc in range(cols):
                    for r in range(nb):
                        Y[i, cc, r] += h / 6.0 * (D1[i, cc, r] + 2.0 * D2[i, cc, r] + 2.0 * D3[i, cc, r] + D4[i, cc, r])
        for r in range(nb):
            for i in range(m):
                out_x[start + r, i] = x[i, r]
                for cc in range(cols):
                    out_j[start + r, i, cc] = Y[i, cc, r]
    return out_x, out_j
