"""Symmetric-subspace Hilbert space of N spin-1/2 particles.

States live in the (N+1)-dimensional space spanned by the Dicke states
|m>, m = -J, ..., J with J = N/2.  Index k = m + J addresses level m in
every array in this package, so half-integer levels (odd N) need no
special handling.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from functools import lru_cache
from typing import NamedTuple

import numpy as np

CONTROLLERS = ("none", "law1", "law2")
ESTIMATORS = ("full", "analytic", "short_time", "integral", "average")
SCHEMES = ("pc", "euler")


@dataclass(frozen=True)
class SimParams:
    """All physical and numerical constants of a run.

    Defaults reproduce the desk-scale setting N=10, M=1, T=5, dt=1e-3 with
    an x-polarized initial coherent state and a feedback gain of 10.
    ``lam`` is the feedback gain (``lambda`` in config files).
    """

    N: int = 10
    M: float = 1.0
    eta: float = 1.0
    gamma: float = 1.0
    dt: float = 1e-3
    T: float = 5.0
    lam: float = 10.0
    m_d: float = 0.0
    theta: float = math.pi / 2
    seed: int = 0
    n_traj: int = 1
    controller: str = "none"
    estimator: str = "full"
    b_max: float = 1e3
    record_every: int = 10
    scheme: str = "pc"

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 1:
            raise ValueError(f"N must be a positive integer, got {self.N!r}")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta!r}")
        for name in ("M", "dt", "T"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)!r}")
        if self.lam < 0:
            raise ValueError(f"lambda (feedback gain) must be >= 0, got {self.lam!r}")
        if self.b_max <= 0:
            raise ValueError(f"b_max must be > 0, got {self.b_max!r}")
        check_level(self.N, self.m_d)
        if int(self.n_traj) != self.n_traj or self.n_traj < 1:
            raise ValueError(f"n_traj must be a positive integer, got {self.n_traj!r}")
        if int(self.record_every) != self.record_every or self.record_every < 1:
            raise ValueError("record_every must be a positive integer")
        if self.controller not in CONTROLLERS:
            raise ValueError(f"controller must be one of {CONTROLLERS}, got {self.controller!r}")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {ESTIMATORS}, got {self.estimator!r}")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")

    @property
    def J(self) -> float:
        return self.N / 2

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    def replace(self, **changes) -> "SimParams":
        values = asdict(self)
        values.update(changes)
        return SimParams(**values)

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))


def check_level(N: int, m: float) -> int:
    """Return the array index of level ``m``; raise if it is not a level of spin N/2."""
    J = N / 2
    k = m + J
    if abs(m) > J + 1e-12 or abs(k - round(k)) > 1e-12:
        raise ValueError(f"m={m!r} is not a Dicke level for N={N} (levels -{J}..{J} in unit steps)")
    return int(round(k))


def levels(N: int) -> np.ndarray:
    """Dicke levels m = -N/2, ..., N/2 as floats."""
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    return np.arange(N + 1) - N / 2


def build_jz(N: int) -> np.ndarray:
    """Diagonal J_z with J_z|m> = m|m>."""
    return np.diag(levels(N)).astype(complex)


def build_jx_jy(N: int) -> tuple[np.ndarray, np.ndarray]:
    """J_x and J_y built from the raising operator <m+1|J_+|m> = sqrt(J(J+1) - m(m+1))."""
    m = levels(N)
    J = N / 2
    raising = np.diag(np.sqrt(J * (J + 1) - m[:-1] * (m[:-1] + 1)), -1).astype(complex)
    lowering = raising.conj().T
    return (raising + lowering) / 2, (raising - lowering) / 2j


class SpinOperators(NamedTuple):
    m: np.ndarray
    jx: np.ndarray
    jy: np.ndarray
    jz: np.ndarray
    jsq: np.ndarray


@lru_cache(maxsize=64)
def spin_operators(N: int) -> SpinOperators:
    """Cached bundle of levels and dense J_x, J_y, J_z, J^2 for spin N/2.

    The returned arrays are marked read-only since the cache shares them.
    """
    jz = build_jz(N)
    jx, jy = build_jx_jy(N)
    jsq = jx @ jx + jy @ jy + jz @ jz
    ops = SpinOperators(levels(N), jx, jy, jz, jsq)
    for a in ops:
        a.setflags(write=False)
    return ops


def coherent_state(N: int, theta: float, phi: float = 0.0) -> np.ndarray:
    """Coherent spin state polarized along (theta, phi).

    Amplitudes are the exact rotated stretched state
    c_m = C(N, J+m)^(1/2) cos(theta/2)^(J+m) sin(theta/2)^(J-m) exp(-i (J-m) phi),
    so theta=0 gives |m=+J> and theta=pi/2, phi=0 is x-polarized.
    """
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    k = np.arange(N + 1)  # k = J + m
    log_binom = np.array([math.lgamma(N + 1) - math.lgamma(i + 1) - math.lgamma(N - i + 1) for i in k])
    c, s = math.cos(theta / 2), math.sin(theta / 2)
    # 0**0 = 1 handles the poles exactly
    mag = np.exp(0.5 * log_binom) * np.power(c, k.astype(float)) * np.power(s, (N - k).astype(float))
    psi = mag * np.exp(-1j * (N - k) * phi)
    return psi / np.linalg.norm(psi)


def dicke_state(N: int, m: float) -> np.ndarray:
    psi = np.zeros(N + 1, dtype=complex)
    psi[check_level(N, m)] = 1.0
    return psi


def as_density_matrix(state: np.ndarray) -> np.ndarray:
    state = np.asarray(state)
    if state.ndim == 1:
        return np.outer(state, state.conj())
    return state


def expect(op: np.ndarray, state: np.ndarray) -> float:
    """<op> for a state vector or density matrix; the imaginary part is dropped.

    Raises ValueError on a dimension mismatch.
    """
    state = np.asarray(state)
    if op.shape[0] != state.shape[0] or op.shape[0] != op.shape[1]:
        raise ValueError(f"operator of shape {op.shape} does not act on state of shape {state.shape}")
    if state.ndim == 1:
        norm = np.vdot(state, state).real
        return float(np.vdot(state, op @ state).real / norm)
    if state.ndim == 2 and state.shape[0] == state.shape[1]:
        return float(np.trace(op @ state).real / np.trace(state).real)
    raise ValueError(f"state must be a vector or a square matrix, got shape {state.shape}")


def variance(op: np.ndarray, state: np.ndarray) -> float:
    mean = expect(op, state)
    return expect(op @ op, state) - mean**2


def populations(state: np.ndarray) -> np.ndarray:
    """Level populations p_m = <m|rho|m>, normalized."""
    state = np.asarray(state)
    if state.ndim == 1:
        p = np.abs(state) ** 2
    else:
        p = np.diagonal(state).real.copy()
    return p / p.sum()
