"""Open-system qubit dynamics under a bosonic Lorentz-Drude bath.

The density matrix ``rho`` evolves together with two bath memory
operators ``Oz`` and ``Ow``:

    d rho/dt = -i[H, rho] + [L, rho Oz^+] - [L^+, Oz rho]
               + [L^+, rho Ow^+] - [L, Ow rho]
    d Oz/dt  = (Gamma T gamma / 2 - i Gamma gamma^2 / 2) L - gamma Oz + [G, Oz]
    d Ow/dt  = (Gamma T gamma / 2) L^+ - gamma Ow + [G, Ow]

with ``G = -iH - (L^+ Oz + L Ow)``.  Units have hbar = k_B = 1.

The numpy functions :func:`rho_derivative` and :func:`memory_derivatives`
are the readable reference; :func:`propagate` runs the same right-hand
side through a compiled fixed-step RK4 loop.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import _kernel

log = logging.getLogger(__name__)

SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)
IDENTITY = np.eye(2, dtype=complex)

EXCHANGE_LEVELS = tuple(range(9))
ANGLES = (math.pi, math.pi / 2, math.pi / 4)
N_ACTIONS = len(EXCHANGE_LEVELS) * len(ANGLES)

TOTAL_TIME = 2 * math.pi
MAX_STEPS = 10
STEP_DURATION = TOTAL_TIME / MAX_STEPS
DEFAULT_SUBSTEPS = 200
DEFAULT_ZEEMAN = 1.0

TRACE_TOL = 1e-8
HERMITIAN_TOL = 1e-10
POSITIVITY_TOL = 1e-6


class DivergenceError(RuntimeError):
    """Integration produced entries above the divergence limit (or NaN)."""


class InvariantError(ValueError):
    """A density matrix violates trace, hermiticity or positivity."""


class PositivityWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class BathParams:
    """Lorentz-Drude bath: coupling strength, characteristic frequency, temperature."""

    coupling: float
    frequency: float
    temperature: float

    def __post_init__(self):
        if self.coupling < 0:
            raise ValueError(f"coupling strength must be >= 0, got {self.coupling}")
        if self.frequency <= 0:
            raise ValueError(f"characteristic frequency must be > 0, got {self.frequency}")
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")

    def as_tuple(self) -> tuple[float, float, float]:
        return (float(self.coupling), float(self.frequency), float(self.temperature))

    def to_dict(self) -> dict:
        return {"Gamma": float(self.coupling), "gamma": float(self.frequency),
                "T": float(self.temperature)}

    @classmethod
    def from_dict(cls, d: dict) -> "BathParams":
        return cls(float(d["Gamma"]), float(d["gamma"]), float(d["T"]))

    def label(self) -> str:
        return f"G{self.coupling:g}_g{self.frequency:g}_T{self.temperature:g}"


@dataclass(frozen=True)
class ControlAction:
    exchange: int
    angle: float

    def __post_init__(self):
        if self.exchange not in EXCHANGE_LEVELS:
            raise ValueError(f"exchange level {self.exchange} not in {EXCHANGE_LEVELS}")
        _angle_position(self.angle)

    @property
    def index(self) -> int:
        return len(ANGLES) * self.exchange + _angle_position(self.angle)

    @classmethod
    def from_index(cls, index: int) -> "ControlAction":
        if not 0 <= index < N_ACTIONS:
            raise ValueError(f"action index {index} outside [0, {N_ACTIONS})")
        J, k = divmod(int(index), len(ANGLES))
        return cls(J, ANGLES[k])


def _angle_position(phi: float) -> int:
    for k, a in enumerate(ANGLES):
        if abs(phi - a) < 1e-12:
            return k
    raise ValueError(f"coupling angle {phi!r} is not one of pi, pi/2, pi/4")


ACTIONS = tuple(ControlAction.from_index(i) for i in range(N_ACTIONS))


@dataclass
class MemoryOperators:
    obar_z: np.ndarray = field(default_factory=lambda: np.zeros((2, 2), complex))
    obar_w: np.ndarray = field(default_factory=lambda: np.zeros((2, 2), complex))


@dataclass
class EvolutionState:
    rho: np.ndarray
    memory: MemoryOperators = field(default_factory=MemoryOperators)
    time: float = 0.0

    @classmethod
    def initial(cls, rho) -> "EvolutionState":
        """Episode start: given ``rho``, zero memory, t = 0."""
        return cls(np.array(rho, dtype=complex), MemoryOperators(), 0.0)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.rho.ravel(), self.memory.obar_z.ravel(),
                               self.memory.obar_w.ravel()]).astype(complex)

    @classmethod
    def from_vector(cls, y: np.ndarray, time: float) -> "EvolutionState":
        y = np.asarray(y)
        return cls(y[0:4].reshape(2, 2).copy(),
                   MemoryOperators(y[4:8].reshape(2, 2).copy(), y[8:12].reshape(2, 2).copy()),
                   float(time))


def check_density(rho, trace_tol=TRACE_TOL, herm_tol=HERMITIAN_TOL, pos_tol=POSITIVITY_TOL):
    """Raise :class:`InvariantError` unless ``rho`` is a valid qubit state."""
    rho = np.asarray(rho)
    if rho.shape != (2, 2):
        raise InvariantError(f"expected a 2x2 matrix, got shape {rho.shape}")
    if not np.all(np.isfinite(rho)):
        raise InvariantError("density matrix has non-finite entries")
    herm = np.max(np.abs(rho - rho.conj().T))
    if herm > herm_tol:
        raise InvariantError(f"not Hermitian (residual {herm:.3e})")
    tr = np.trace(rho).real
    if abs(tr - 1) > trace_tol:
        raise InvariantError(f"trace {tr!r} deviates from 1")
    lam = np.linalg.eigvalsh(rho).min()
    if lam < -pos_tol:
        raise InvariantError(f"negative eigenvalue {lam:.3e}")
    return rho


def pure_density(ket) -> np.ndarray:
    ket = np.asarray(ket, dtype=complex)
    ket = ket / np.linalg.norm(ket)
    return np.outer(ket, ket.conj())


def build_hamiltonian(J, h=DEFAULT_ZEEMAN) -> np.ndarray:
    """System Hamiltonian ``J sigma_z + h sigma_x``."""
    return J * SIGMA_Z + h * SIGMA_X


def build_lindblad(phi) -> np.ndarray:
    """Coupling operator ``cos(phi)/2 sigma_x + sin(phi)/2 sigma_z``."""
    _angle_position(phi)
    return 0.5 * math.cos(phi) * SIGMA_X + 0.5 * math.sin(phi) * SIGMA_Z


def _source_coefficients(bath: BathParams) -> tuple[complex, complex]:
    G, g, T = bath.as_tuple()
    cz = complex(G * T * g / 2, -G * g * g / 2)
    cw = complex(G * T * g / 2, 0.0)
    return cz, cw


def memory_derivatives(state: EvolutionState, H, L, bath: BathParams):
    """Right-hand sides ``(dOz/dt, dOw/dt)`` of the memory equations."""
    oz, ow = state.memory.obar_z, state.memory.obar_w
    Ld = L.conj().T
    cz, cw = _source_coefficients(bath)
    G = -1j * H - (Ld @ oz + L @ ow)
    doz = cz * L - bath.frequency * oz + (G @ oz - oz @ G)
    dow = cw * Ld - bath.frequency * ow + (G @ ow - ow @ G)
    return doz, dow


def _comm(a, b):
    return a @ b - b @ a


def rho_derivative(rho, memory: MemoryOperators, H, L) -> np.ndarray:
    """Five-term right-hand side of the master equation for ``rho``."""
    oz, ow = memory.obar_z, memory.obar_w
    Ld = L.conj().T
    return (-1j * _comm(H, rho)
            + _comm(L, rho @ oz.conj().T) - _comm(Ld, oz @ rho)
            + _comm(Ld, rho @ ow.conj().T) - _comm(L, ow @ rho))


@lru_cache(maxsize=8)
def _action_operators(h: float) -> tuple[np.ndarray, np.ndarray]:
    Hs = np.array([build_hamiltonian(a.exchange, h).ravel() for a in ACTIONS])
    Ls = np.array([build_lindblad(a.angle).ravel() for a in ACTIONS])
    Hs.setflags(write=False)
    Ls.setflags(write=False)
    return Hs, Ls


def _min_eigenvalue(rho) -> float:
    half_tr = 0.5 * (rho[0, 0].real + rho[1, 1].real)
    det = (rho[0, 0] * rho[1, 1] - rho[0, 1] * rho[1, 0]).real
    return half_tr - math.sqrt(max(half_tr * half_tr - det, 0.0))


def _monitor(rho):
    lam = _min_eigenvalue(rho)
    if lam < -POSITIVITY_TOL:
        # constant text so the default filter reports each call site once
        log.debug("min eigenvalue %.3e after propagation", lam)
        warnings.warn("density matrix lost positivity beyond tolerance",
                      PositivityWarning, stacklevel=3)


def propagate(start: EvolutionState, action: ControlAction | int, bath: BathParams,
              h=DEFAULT_ZEEMAN, duration=STEP_DURATION, substeps=DEFAULT_SUBSTEPS,
              record=False):
    """Advance ``start`` through one interval of piecewise-constant control.

    Uses ``substeps`` classic RK4 steps with H and L held fixed. Memory
    operators carry over from ``start``; nothing is reset here.

    Returns the end-of-interval :class:`EvolutionState`. With
    ``record=True`` returns ``(state, rhos)`` where ``rhos`` has shape
    ``(substeps + 1, 2, 2)`` and holds rho at every substep.

    Raises
    ------
    DivergenceError
        If any entry exceeds 1e6 in magnitude or becomes NaN.
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    index = action if isinstance(action, (int, np.integer)) else action.index
    Hs, Ls = _action_operators(float(h))
    cz, cw = _source_coefficients(bath)
    traj = np.empty((substeps + 1 if record else 0, 12), complex)
    y, diverged = _kernel.rk4(start.to_vector(), Hs[index], Ls[index], cz, cw,
                              float(bath.frequency), float(duration), int(substeps), traj)
    if diverged:
        raise DivergenceError(
            f"integration diverged under action {index} with {substeps} substeps")
    end = EvolutionState.from_vector(y, start.time + duration)
    _monitor(end.rho)
    if record:
        return end, traj[:, 0:4].reshape(-1, 2, 2)
    return end


def propagate_all_actions(start: EvolutionState, bath: BathParams, h=DEFAULT_ZEEMAN,
                          duration=STEP_DURATION, substeps=DEFAULT_SUBSTEPS):
    """End states for all 27 actions branched from the same snapshot."""
    Hs, Ls = _action_operators(float(h))
    cz, cw = _source_coefficients(bath)
    out = np.empty((N_ACTIONS, 12), complex)
    if _kernel.rk4_branches(start.to_vector(), Hs, Ls, cz, cw, float(bath.frequency),
                            float(duration), int(substeps), out):
        raise DivergenceError(f"integration diverged on a branch with {substeps} substeps")
    t = start.time + duration
    return [EvolutionState.from_vector(row, t) for row in out]


def fidelity(rho, target) -> float:
    """Uhlmann fidelity of two qubit states, squared form.

    For 2x2 matrices this is ``Tr(rho sigma) + 2 sqrt(det rho det sigma)``
    and reduces to ``<psi|rho|psi>`` for a pure target.
    """
    rho = np.asarray(rho)
    target = np.asarray(target)
    overlap = float(np.sum(rho * target.T).real)
    d1 = float((rho[0, 0] * rho[1, 1] - rho[0, 1] * rho[1, 0]).real)
    d2 = float((target[0, 0] * target[1, 1] - target[0, 1] * target[1, 0]).real)
    prod = d1 * d2
    if prod < 0:
        if prod < -1e-9:
            raise InvariantError(f"determinant product {prod:.3e} is negative")
        prod = 0.0
    # a non-positive rho (see PositivityWarning) can push the overlap past 1
    return min(max(overlap + 2.0 * math.sqrt(prod), 0.0), 1.0)


def root_fidelity(rho, target) -> float:
    """Square root of :func:`fidelity` (the trace-norm convention)."""
    return math.sqrt(fidelity(rho, target))


FIDELITY_MEASURES = {"root": root_fidelity, "uhlmann": fidelity}


def fidelity_measure(name: str):
    try:
        return FIDELITY_MEASURES[name]
    except KeyError:
        raise ValueError(f"unknown fidelity measure {name!r}; "
                         f"choose from {sorted(FIDELITY_MEASURES)}") from None
