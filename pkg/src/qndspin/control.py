"""Cost functions and state-based feedback laws.

The actuator is a field b along y, entering as H = gamma * b * J_y with
d rho = -i [H, rho] dt.  Under this convention a positive b rotates
<J_z> towards -z when <J_x> > 0, and the open-loop cost
U = (<J_z> - m_d)^2 + <dJ_z^2> drifts on average as
dE[U]/dt = -2 gamma b (<J_x J_z + J_z J_x>/2 - m_d <J_x>).

All functions accept a state vector, a density matrix, or a leading batch
axis of either (``(B, d)`` vectors, ``(B, d, d)`` matrices); batch input
returns an array of values.  A square 2-D array is read as one density
matrix; pass ``pure=True`` when it is a batch of d state vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hilbert import CONTROLLERS, SimParams, check_level, spin_operators


@dataclass(frozen=True)
class ControllerSpec:
    kind: str = "none"
    lam: float = 10.0
    m_d: float = 0.0
    b_max: float = 1e3

    def __post_init__(self):
        if self.kind not in CONTROLLERS:
            raise ValueError(f"controller kind must be one of {CONTROLLERS}, got {self.kind!r}")
        if self.lam < 0:
            raise ValueError("gain must be non-negative")
        if self.b_max <= 0:
            raise ValueError("b_max must be positive")

    @classmethod
    def from_params(cls, params: SimParams) -> "ControllerSpec":
        return cls(params.controller, params.lam, params.m_d, params.b_max)


def _is_vector(states: np.ndarray, pure: bool | None) -> bool:
    # a square 2-D array is a single density matrix unless pure=True says
    # it is a batch of d state vectors
    if pure is not None:
        return pure
    return not (states.ndim >= 2 and states.shape[-2] == states.shape[-1])


def _dim(states: np.ndarray) -> int:
    return states.shape[-1]


def _populations(states: np.ndarray, pure: bool | None = None) -> np.ndarray:
    if _is_vector(states, pure):
        p = states.real**2 + states.imag**2
    else:
        p = np.diagonal(states, axis1=-2, axis2=-1).real
    return p / p.sum(axis=-1, keepdims=True)


def jz_moments(states: np.ndarray, pure: bool | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Return (<J_z>, <dJ_z^2>) for a single or batched state."""
    states = np.asarray(states)
    m = spin_operators(_dim(states) - 1).m
    p = _populations(states, pure)
    mean = p @ m
    var = p @ (m * m) - mean**2
    return mean, var


def jx_and_correlator(states: np.ndarray, pure: bool | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Return (<J_x>, <J_x J_z + J_z J_x>/2)."""
    states = np.asarray(states)
    ops = spin_operators(_dim(states) - 1)
    m = ops.m
    if _is_vector(states, pure):
        norm = (states.real**2 + states.imag**2).sum(axis=-1)
        jx_psi = states @ ops.jx.T
        overlap = states.conj() * jx_psi
        jx = overlap.real.sum(axis=-1) / norm
        corr = (overlap * m).real.sum(axis=-1) / norm
    else:
        tr = np.trace(states, axis1=-2, axis2=-1).real
        jx_rho = np.diagonal(ops.jx @ states, axis1=-2, axis2=-1)
        jx = jx_rho.real.sum(axis=-1) / tr
        # Re Tr(J_z J_x rho) = <{J_x, J_z}>/2 for Hermitian rho
        corr = (m * jx_rho).real.sum(axis=-1) / tr
    return jx, corr


def cost_u(rho: np.ndarray, m_d: float, pure: bool | None = None):
    """U = (<J_z> - m_d)^2 + <dJ_z^2> = sum_m p_m (m - m_d)^2."""
    mean, var = jz_moments(rho, pure)
    u = (mean - m_d) ** 2 + var
    return np.maximum(u, 0.0) if np.ndim(u) else max(float(u), 0.0)


def cost_uf(rho: np.ndarray, target: np.ndarray) -> float:
    """U_f = 1 - <psi_d|rho|psi_d>."""
    rho = np.asarray(rho)
    target = np.asarray(target)
    if rho.ndim == 1:
        fid = abs(np.vdot(target, rho)) ** 2 / np.vdot(rho, rho).real
    else:
        fid = np.vdot(target, rho @ target).real / np.trace(rho).real
    return float(min(max(1.0 - fid, 0.0), 1.0))


def control_law_1(rho: np.ndarray, spec: ControllerSpec, pure: bool | None = None):
    """b1 = lam * (<J_x J_z + J_z J_x>/2 - m_d <J_x>), unclamped."""
    jx, corr = jx_and_correlator(rho, pure)
    return spec.lam * (corr - spec.m_d * jx)


def control_law_2(rho: np.ndarray, spec: ControllerSpec, pure: bool | None = None):
    """b2 = lam * (<J_z> - m_d), unclamped."""
    mean, _ = jz_moments(rho, pure)
    return spec.lam * (mean - spec.m_d)


def feedback_field(states: np.ndarray, spec: ControllerSpec, pure: bool | None = None,
                   jz_estimate=None) -> np.ndarray:
    """Clamped control field for a single or batched state.

    ``jz_estimate`` substitutes a reduced estimate of <J_z> for law 2; law 1
    needs the full state and ignores it.
    """
    states = np.asarray(states)
    batch_shape = states.shape[:-1] if _is_vector(states, pure) else states.shape[:-2]
    if spec.kind == "none":
        return np.zeros(batch_shape)
    if spec.kind == "law1":
        b = control_law_1(states, spec, pure)
    elif jz_estimate is not None:
        b = spec.lam * (np.asarray(jz_estimate, dtype=float) - spec.m_d)
    else:
        b = control_law_2(states, spec, pure)
    return np.clip(b, -spec.b_max, spec.b_max)


def expected_cost_drift(rho: np.ndarray, b, params: SimParams, m_d: float, pure: bool | None = None):
    """Rate dE[U]/dt = -2 gamma b (<{J_x, J_z}>/2 - m_d <J_x>) at the given state."""
    check_level(_dim(np.asarray(rho)) - 1, m_d)
    jx, corr = jx_and_correlator(rho, pure)
    return -2.0 * params.gamma * np.asarray(b) * (corr - m_d * jx)
