"""Pauli-4 POVM encoding of qubit states and model feature vectors."""
from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from .dynamics import BathParams, IDENTITY, pure_density

# |l> is the +1 eigenstate of sigma_y
POVM_CONVENTION = "pauli4:|0>,|l>=(|0>+i|1>)/sqrt2,|+>=(|0>+|1>)/sqrt2"

CASES = (1, 2, 3)


@lru_cache(maxsize=1)
def _operators() -> tuple[np.ndarray, ...]:
    s = 1 / math.sqrt(2)
    m1 = pure_density([1, 0]) / 3
    m2 = pure_density([s, 1j * s]) / 3
    m3 = pure_density([s, s]) / 3
    m4 = IDENTITY - m1 - m2 - m3
    ops = (m1, m2, m3, m4)
    for m in ops:
        m.setflags(write=False)
    return ops


def povm_operators() -> list[np.ndarray]:
    """The four Pauli-4 effects ``M1..M4``; they sum to the identity."""
    return [m.copy() for m in _operators()]


@lru_cache(maxsize=1)
def _overlap_inverse() -> np.ndarray:
    ops = _operators()
    T = np.array([[np.trace(a @ b).real for b in ops] for a in ops])
    return np.linalg.inv(T)


def encode_density(rho) -> np.ndarray:
    """Outcome probabilities ``p_i = Tr(rho M_i)``."""
    rho = np.asarray(rho)
    # Tr(rho M) = sum_ij rho_ij M_ji
    return np.array([np.sum(rho * m.T).real for m in _operators()])


def decode_distribution(p) -> np.ndarray:
    """Reconstruct rho from its four POVM probabilities.

    Raises ``ValueError`` when the reconstructed trace is off by more than
    1e-6, which only happens for corrupted feature vectors.
    """
    p = np.asarray(p, dtype=float)
    if p.shape != (4,):
        raise ValueError(f"expected 4 probabilities, got shape {p.shape}")
    coeffs = p @ _overlap_inverse()
    rho = sum(c * m for c, m in zip(coeffs, _operators()))
    tr = np.trace(rho).real
    if abs(tr - 1) > 1e-6:
        raise ValueError(f"distribution reconstructs to trace {tr:.8f}")
    return rho


def build_features(p_ini, p_tar, bath: BathParams | None, case: int, scaling=None) -> np.ndarray:
    """Model input: ``[p_ini, p_tar]`` or, for case 3, ``[p_ini, p_tar, Gamma, gamma, T]``.

    ``scaling`` optionally divides the three bath values elementwise; the
    default feeds them raw.
    """
    if case not in CASES:
        raise ValueError(f"case must be one of {CASES}, got {case!r}")
    parts = [np.asarray(p_ini, float), np.asarray(p_tar, float)]
    if case == 3:
        if bath is None:
            raise ValueError("case 3 features need bath parameters")
        env = np.array(bath.as_tuple())
        if scaling is not None:
            env = env / np.asarray(scaling, float)
        parts.append(env)
    return np.concatenate(parts)


def feature_width(case: int) -> int:
    return 11 if case == 3 else 8
