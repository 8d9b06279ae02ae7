"""Reference implementations used as test oracles.

Nothing here imports the integrator under test; the master equation is
written out again and handed to scipy's adaptive DOP853 solver.
"""
import math

import numpy as np
from scipy.integrate import solve_ivp
from scipy.linalg import sqrtm

from qpulse import dynamics as dyn
from qpulse.dynamics import EvolutionState


def random_density(rng, pure=False):
    v = rng.normal(size=3)
    v /= np.linalg.norm(v)
    r = 1.0 if pure else rng.uniform(0, 1)
    x, y, z = r * v
    return 0.5 * np.array([[1 + z, x - 1j * y], [x + 1j * y, 1 - z]])


# --- independent oracle: the equations coded again from scratch and
# handed to scipy's adaptive integrator.

def _oracle_rhs(H, L, bath):
    G_, g, T = bath.as_tuple()
    Ld = L.conj().T
    a_z = G_ * T * g / 2 - 1j * G_ * g * g / 2
    a_w = G_ * T * g / 2

    def rhs(_t, y):
        y = y.view(complex)
        rho, oz, ow = (y[k:k + 4].reshape(2, 2) for k in (0, 4, 8))
        gen = -1j * H - Ld @ oz - L @ ow
        d_oz = a_z * L - g * oz + gen @ oz - oz @ gen
        d_ow = a_w * Ld - g * ow + gen @ ow - ow @ gen
        c = lambda a, b: a @ b - b @ a
        d_rho = (-1j * c(H, rho) + c(L, rho @ oz.conj().T) - c(Ld, oz @ rho)
                 + c(Ld, rho @ ow.conj().T) - c(L, ow @ rho))
        return np.concatenate([d_rho.ravel(), d_oz.ravel(), d_ow.ravel()]).view(float)
    return rhs


def oracle_propagate(state, action, bath, h=1.0, duration=dyn.STEP_DURATION):
    H = action.exchange * np.diag([1, -1]).astype(complex) + h * np.array([[0, 1], [1, 0]])
    L = 0.5 * math.cos(action.angle) * np.array([[0, 1], [1, 0]]) \
        + 0.5 * math.sin(action.angle) * np.diag([1, -1])
    y0 = state.to_vector().view(float)
    sol = solve_ivp(_oracle_rhs(H, L.astype(complex), bath), (0, duration), y0,
                    method="DOP853", rtol=1e-12, atol=1e-13)
    return EvolutionState.from_vector(sol.y[:, -1].copy().view(complex), state.time + duration)


def unitary_step(J, h=1.0, t=dyn.STEP_DURATION):
    """exp(-i t (J sz + h sx)) in closed form: cos(wt) I - i sin(wt) H / w."""
    w = math.hypot(J, h)
    H = np.array([[J, h], [h, -J]], complex)
    return math.cos(w * t) * np.eye(2) - 1j * math.sin(w * t) * H / w


def sqrtm_fidelity(rho, sigma):
    """Uhlmann fidelity (Tr sqrt(sqrt(rho) sigma sqrt(rho)))^2 via matrix square roots."""
    r = sqrtm(rho)
    return float(np.trace(sqrtm(r @ sigma @ r)).real ** 2)


def jitter_biases(params, rng):
    # zero biases can put a pre-activation exactly on the ReLU kink
    for b in params.biases:
        b += rng.normal(scale=0.1, size=b.shape)
    return params


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)


def numeric_gradient(loss_fn, params, h=1e-5):
    grads = []
    for p in params.arrays():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = loss_fn()
            p[idx] = old - h
            down = loss_fn()
            p[idx] = old
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads
