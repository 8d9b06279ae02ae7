"""Compiled RK4 kernel for the joint (rho, Oz, Ow) system.

State vectors are flat complex arrays of length 12: rho, Oz, Ow, each a
row-major 2x2 block. H and L are flat length-4 arrays.
"""
import numba
import numpy as np

DIVERGENCE_LIMIT = 1e6
# no nnan/ninf: the divergence check must see NaN and inf
_FLAGS = {"contract", "arcp", "nsz", "reassoc", "afn"}


@numba.njit(cache=True, inline="always")
def _mul(a0, a1, a2, a3, b0, b1, b2, b3):
    return (a0 * b0 + a1 * b2, a0 * b1 + a1 * b3,
            a2 * b0 + a3 * b2, a2 * b1 + a3 * b3)


@numba.njit(cache=True, fastmath=_FLAGS)
def derivative(y, H, L, cz, cw, gam, out):
    r0, r1, r2, r3 = y[0], y[1], y[2], y[3]
    z0, z1, z2, z3 = y[4], y[5], y[6], y[7]
    w0, w1, w2, w3 = y[8], y[9], y[10], y[11]
    h0, h1, h2, h3 = H[0], H[1], H[2], H[3]
    l0, l1, l2, l3 = L[0], L[1], L[2], L[3]
    # L^dagger
    d0, d1, d2, d3 = np.conj(l0), np.conj(l2), np.conj(l1), np.conj(l3)

    # G = -iH - (L^dag Oz + L Ow), shared by both memory equations
    a = _mul(d0, d1, d2, d3, z0, z1, z2, z3)
    b = _mul(l0, l1, l2, l3, w0, w1, w2, w3)
    g0 = -1j * h0 - a[0] - b[0]
    g1 = -1j * h1 - a[1] - b[1]
    g2 = -1j * h2 - a[2] - b[2]
    g3 = -1j * h3 - a[3] - b[3]

    p = _mul(g0, g1, g2, g3, z0, z1, z2, z3)
    q = _mul(z0, z1, z2, z3, g0, g1, g2, g3)
    out[4] = cz * l0 - gam * z0 + p[0] - q[0]
    out[5] = cz * l1 - gam * z1 + p[1] - q[1]
    out[6] = cz * l2 - gam * z2 + p[2] - q[2]
    out[7] = cz * l3 - gam * z3 + p[3] - q[3]

    p = _mul(g0, g1, g2, g3, w0, w1, w2, w3)
    q = _mul(w0, w1, w2, w3, g0, g1, g2, g3)
    out[8] = cw * d0 - gam * w0 + p[0] - q[0]
    out[9] = cw * d1 - gam * w1 + p[1] - q[1]
    out[10] = cw * d2 - gam * w2 + p[2] - q[2]
    out[11] = cw * d3 - gam * w3 + p[3] - q[3]

    # X = [L, rho Oz^dag] + [L^dag, rho Ow^dag]; the other two terms are -X^dag
    p = _mul(h0, h1, h2, h3, r0, r1, r2, r3)
    q = _mul(r0, r1, r2, r3, h0, h1, h2, h3)
    t = _mul(r0, r1, r2, r3, np.conj(z0), np.conj(z2), np.conj(z1), np.conj(z3))
    u = _mul(r0, r1, r2, r3, np.conj(w0), np.conj(w2), np.conj(w1), np.conj(w3))
    la = _mul(l0, l1, l2, l3, t[0], t[1], t[2], t[3])
    lb = _mul(t[0], t[1], t[2], t[3], l0, l1, l2, l3)
    da = _mul(d0, d1, d2, d3, u[0], u[1], u[2], u[3])
    db = _mul(u[0], u[1], u[2], u[3], d0, d1, d2, d3)
    x0 = la[0] - lb[0] + da[0] - db[0]
    x1 = la[1] - lb[1] + da[1] - db[1]
    x2 = la[2] - lb[2] + da[2] - db[2]
    x3 = la[3] - lb[3] + da[3] - db[3]
    out[0] = -1j * (p[0] - q[0]) + x0 + np.conj(x0)
    out[1] = -1j * (p[1] - q[1]) + x1 + np.conj(x2)
    out[2] = -1j * (p[2] - q[2]) + x2 + np.conj(x1)
    out[3] = -1j * (p[3] - q[3]) + x3 + np.conj(x3)


@numba.njit(cache=True, fastmath=_FLAGS)
def rk4(y0, H, L, cz, cw, gam, duration, n, traj):
    """Integrate ``n`` equal RK4 steps; returns (y_end, diverged).

    If ``traj`` has ``n + 1`` rows every substep state is written into it.
    """
    record = traj.shape[0] == n + 1
    h = duration / n
    y = y0.copy()
    k1 = np.empty(12, np.complex128)
    k2 = np.empty(12, np.complex128)
    k3 = np.empty(12, np.complex128)
    k4 = np.empty(12, np.complex128)
    tmp = np.empty(12, np.complex128)
    if record:
        traj[0, :] = y
    for step in range(n):
        derivative(y, H, L, cz, cw, gam, k1)
        for i in range(12):
            tmp[i] = y[i] + 0.5 * h * k1[i]
        derivative(tmp, H, L, cz, cw, gam, k2)
        for i in range(12):
            tmp[i] = y[i] + 0.5 * h * k2[i]
        derivative(tmp, H, L, cz, cw, gam, k3)
        for i in range(12):
            tmp[i] = y[i] + h * k3[i]
        derivative(tmp, H, L, cz, cw, gam, k4)
        big = 0.0
        for i in range(12):
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
            m = abs(y[i])
            if m > big or m != m:
                big = m if m == m else np.inf
        if record:
            traj[step + 1, :] = y
        if big > DIVERGENCE_LIMIT:
            return y, True
    return y, False


@numba.njit(cache=True, fastmath=_FLAGS)
def rk4_branches(y0, Hs, Ls, cz, cw, gam, duration, n, out):
    """Propagate one start state under every (H, L) pair; rows of ``out``."""
    empty = np.empty((0, 12), np.complex128)
    diverged = False
    for a in range(Hs.shape[0]):
        y, bad = rk4(y0, Hs[a], Ls[a], cz, cw, gam, duration, n, empty)
        out[a, :] = y
        diverged = diverged or bad
    return diverged
