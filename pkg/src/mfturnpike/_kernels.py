"""Compiled inner loops for the pairwise particle dynamics.

Every interaction kernel in the library is radial, ``P(z) = -phi(|z|) z``,
so one profile function covers all kinds.  Kernel kinds are encoded as
integers so the loops stay in nopython mode:

    0 zero, 1 linear, 2 saturating, 3 tabulated
"""
import numpy as np
from numba import njit

ZERO, LINEAR, SATURATING, TABULATED = 0, 1, 2, 3


@njit(cache=True, nogil=True)
def radial_profile(code, kappa, radii, values, r):
    """Return ``(phi(r), phi'(r) / r)`` for the kernel ``P(z) = -phi(|z|) z``."""
    if code == ZERO:
        return 0.0, 0.0
    if code == LINEAR:
        return kappa, 0.0
    if code == SATURATING:
        q = 1.0 + r * r
        return kappa / q, -2.0 * kappa / (q * q)
    phi = np.interp(r, radii, values)
    if r <= 0.0 or r < radii[0] or r >= radii[-1]:
        return phi, 0.0
    j = np.searchsorted(radii, r, side="right") - 1
    slope = (values[j + 1] - values[j]) / (radii[j + 1] - radii[j])
    return phi, slope / r


@njit(cache=True, nogil=True)
def pair_forces(x, code, kappa, radii, values):
    """(1/N) sum_j P(x_i - x_j) for every i, summed in index order."""
    n, d = x.shape
    out = np.zeros((n, d))
    if code == ZERO:
        return out
    if code == LINEAR:
        mean = np.zeros(d)
        for j in range(n):
            for c in range(d):
                mean[c] += x[j, c]
        for c in range(d):
            mean[c] /= n
        for i in range(n):
            for c in range(d):
                out[i, c] = -kappa * (x[i, c] - mean[c])
        return out
    z = np.empty(d)
    for i in range(n):
        for j in range(n):
            r2 = 0.0
            for c in range(d):
                z[c] = x[i, c] - x[j, c]
                r2 += z[c] * z[c]
            phi, _ = radial_profile(code, kappa, radii, values, np.sqrt(r2))
            for c in range(d):
                out[i, c] -= phi * z[c]
    for i in range(n):
        for c in range(d):
            out[i, c] /= n
    return out


@njit(cache=True, nogil=True)
def pair_forces_vjp(x, lam, code, kappa, radii, values):
    """Vector-Jacobian product ``(dF/dx)^T lam`` of :func:`pair_forces`."""
    n, d = x.shape
    g = np.zeros((n, d))
    if code == ZERO:
        return g
    if code == LINEAR:
        mean = np.zeros(d)
        for j in range(n):
            for c in range(d):
                mean[c] += lam[j, c]
        for c in range(d):
            mean[c] /= n
        for i in range(n):
            for c in range(d):
                g[i, c] = -kappa * (lam[i, c] - mean[c])
        return g
    z = np.empty(d)
    for i in range(n):
        for j in range(n):
            r2 = 0.0
            zl = 0.0
            for c in range(d):
                z[c] = x[i, c] - x[j, c]
                r2 += z[c] * z[c]
                zl += z[c] * lam[i, c]
            phi, dphi_r = radial_profile(code, kappa, radii, values, np.sqrt(r2))
            # the radial Jacobian is symmetric: J = -phi I - (phi'/r) z z^T
            for c in range(d):
                w = -phi * lam[i, c] - dphi_r * zl * z[c]
                g[i, c] += w
                g[j, c] -= w
    for i in range(n):
        for c in range(d):
            g[i, c] /= n
    return g


@njit(cache=True, nogil=True)
def rk4_step(x, u, h, code, kappa, radii, values):
    """One RK4 step of dx/dt = F(x) + u with u held constant over the step.

    Returns the new state and the three interior stage states.
    """
    k1 = pair_forces(x, code, kappa, radii, values) + u
    z2 = x + 0.5 * h * k1
    k2 = pair_forces(z2, code, kappa, radii, values) + u
    z3 = x + 0.5 * h * k2
    k3 = pair_forces(z3, code, kappa, radii, values) + u
    z4 = x + h * k3
    k4 = pair_forces(z4, code, kappa, radii, values) + u
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4), z2, z3, z4


@njit(cache=True, nogil=True)
def rollout(x0, u, h, code, kappa, radii, values):
    """Integrate under zero-order-hold controls ``u`` of shape (K, N, d).

    Returns positions (K+1, N, d), stage states (K, 3, N, d) and the index of
    the first step producing a non-finite state (-1 when none).
    """
    K = u.shape[0]
    n, d = x0.shape
    xs = np.empty((K + 1, n, d))
    stages = np.empty((K, 3, n, d))
    xs[0] = x0
    for k in range(K):
        xn, z2, z3, z4 = rk4_step(xs[k], u[k], h, code, kappa, radii, values)
        stages[k, 0] = z2
        stages[k, 1] = z3
        stages[k, 2] = z4
        xs[k + 1] = xn
        if not np.all(np.isfinite(xn)):
            return xs, stages, k
    return xs, stages, -1


@njit(cache=True, nogil=True)
def adjoint_sweep(xs, stages, h, code, kappa, radii, values, dl_dx, dl_du):
    """Reverse sweep through the RK4 step map.

    ``dl_dx`` and ``dl_du`` (both (K, N, d)) are the derivatives of the
    quadrature terms with respect to the left-endpoint state and the control
    of each step.  Returns the exact gradient with respect to every control.
    """
    K = dl_du.shape[0]
    lam = np.zeros(xs.shape[1:])
    grad = np.empty(dl_du.shape)
    for k in range(K - 1, -1, -1):
        a1 = (h / 6.0) * lam
        a2 = (h / 3.0) * lam
        a3 = (h / 3.0) * lam
        a4 = (h / 6.0) * lam
        ax = lam.copy()
        g4 = pair_forces_vjp(stages[k, 2], a4, code, kappa, radii, values)
        ax += g4
        a3 = a3 + h * g4
        g3 = pair_forces_vjp(stages[k, 1], a3, code, kappa, radii, values)
        ax += g3
        a2 = a2 + 0.5 * h * g3
        g2 = pair_forces_vjp(stages[k, 0], a2, code, kappa, radii, values)
        ax += g2
        a1 = a1 + 0.5 * h * g2
        g1 = pair_forces_vjp(xs[k], a1, code, kappa, radii, values)
        ax += g1
        grad[k] = a1 + a2 + a3 + a4 + dl_du[k]
        lam = ax + dl_dx[k]
    return grad


@njit(cache=True, nogil=True)
def cross_forces(y, src, code, kappa, radii, values):
    """(1/M) sum_j P(y_i - src_j): the field generated by ``src`` at points ``y``."""
    n, d = y.shape
    m = src.shape[0]
    out = np.zeros((n, d))
    if code == ZERO:
        return out
    z = np.empty(d)
    for i in range(n):
        for j in range(m):
            r2 = 0.0
            for c in range(d):
                z[c] = y[i, c] - src[j, c]
                r2 += z[c] * z[c]
            phi, _ = radial_profile(code, kappa, radii, values, np.sqrt(r2))
            for c in range(d):
                out[i, c] -= phi * z[c]
    for i in range(n):
        for c in range(d):
            out[i, c] /= m
    return out
