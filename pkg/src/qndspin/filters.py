"""Estimators of <J_z> from the homodyne record.

Without a control field the conditional state depends on the record only
through its integral Y = int_0^t y ds, and the unnormalized state is known
in closed form:

    rho~[m, m'] = c_m c_m'* exp[(M(1-eta) m m' - M(1+eta)(m^2 + m'^2)/2) t
                                + 2 M eta (m + m') Y]

Everything here evaluates that expression or one of its reductions: the
short-time Gaussian filter, the integral (continuum) estimator and the
running photocurrent average.  Exponential weights are handled in log
space; at t=5, N=10 they span e^-250.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .hilbert import levels


class DegeneratePosteriorError(ArithmeticError):
    """All posterior weights vanished (empty prior support)."""


@dataclass(frozen=True)
class AnalyticFilterState:
    """Prior amplitudes plus the sufficient statistics (t, Y) of the record."""

    c: np.ndarray
    t: float
    Y: float
    M: float = 1.0
    eta: float = 1.0

    def __post_init__(self):
        if self.t < 0:
            raise ValueError("elapsed time must be non-negative")
        if not np.all(np.isfinite(self.Y)):
            raise ValueError("integrated photocurrent must be finite")

    @property
    def N(self) -> int:
        return len(self.c) - 1


def log_population_weights(prior_populations, t, Y, M, eta) -> np.ndarray:
    """log of |c_m|^2 exp(-2 M eta m^2 t + 4 M eta m Y); broadcasts over Y and t."""
    p = np.asarray(prior_populations, dtype=float)
    m = levels(len(p) - 1)
    with np.errstate(divide="ignore"):
        log_prior = np.log(p)
    t = np.asarray(t, dtype=float)[..., None]
    Y = np.asarray(Y, dtype=float)[..., None]
    return log_prior - 2 * M * eta * m**2 * t + 4 * M * eta * m * Y


def _normalized_weights(log_w: np.ndarray) -> np.ndarray:
    top = np.max(log_w, axis=-1, keepdims=True)
    if not np.all(np.isfinite(top)):
        raise DegeneratePosteriorError("posterior weights are all zero")
    w = np.exp(log_w - top)
    return w / w.sum(axis=-1, keepdims=True)


def analytic_moment(f: AnalyticFilterState, k: int) -> float:
    """Unnormalized Tr[J_z^k rho~(t)] = sum_m m^k |c_m|^2 exp(...).

    Divide by ``analytic_moment(f, 0)`` for <J_z^k>, or call
    ``analytic_expectation`` which never leaves log space.
    """
    if k < 0:
        raise ValueError("moment order must be >= 0")
    log_w = log_population_weights(np.abs(f.c) ** 2, f.t, f.Y, f.M, f.eta)
    top = np.max(log_w)
    if not np.isfinite(top):
        raise DegeneratePosteriorError("posterior weights are all zero")
    m = levels(f.N)
    return float(np.exp(top) * np.sum(m**k * np.exp(log_w - top)))


def analytic_expectation(prior_populations, t, Y, M, eta, k: int = 1):
    """Normalized <J_z^k>(t) from the prior populations and the record integral Y.

    ``Y`` (and ``t``) may be arrays; the result has their broadcast shape.
    """
    w = _normalized_weights(log_population_weights(prior_populations, t, Y, M, eta))
    m = levels(np.shape(prior_populations)[-1] - 1)
    return w @ (m**k)


def analytic_density_matrix(f: AnalyticFilterState) -> np.ndarray:
    """Normalized conditional density matrix for a field-free record."""
    m = levels(f.N)
    c = np.asarray(f.c, dtype=complex)
    M, eta, t, Y = f.M, f.eta, f.t, f.Y
    mm = m[:, None] * m[None, :]
    sq = m[:, None] ** 2 + m[None, :] ** 2
    with np.errstate(divide="ignore"):
        log_mag = np.log(np.abs(c))
    exponent = (M * (1 - eta) * mm - 0.5 * M * (1 + eta) * sq) * t + 2 * M * eta * (m[:, None] + m[None, :]) * Y
    log_w = log_mag[:, None] + log_mag[None, :] + exponent
    top = np.max(np.diagonal(log_w))
    if not np.isfinite(top):
        raise DegeneratePosteriorError("posterior weights are all zero")
    phase = np.exp(1j * (np.angle(c)[:, None] - np.angle(c)[None, :]))
    rho = np.exp(log_w - top) * phase
    return rho / np.trace(rho).real


def short_time_variance(t, var0, M, eta):
    """Deterministic Gaussian-closure variance var0 / (1 + 4 M eta var0 t)."""
    if np.any(np.asarray(var0) <= 0):
        raise ValueError("initial variance must be positive")
    if np.any(np.asarray(t) < 0):
        raise ValueError("t must be non-negative")
    return var0 / (1 + 4 * M * eta * var0 * t)


def short_time_innovation(y_dt, mean, dt, M, eta):
    """dW_s = 2 sqrt(M eta) (y dt - <J_z>_s dt)."""
    return 2 * np.sqrt(M * eta) * (y_dt - mean * dt)


def short_time_mean_step(mean, var, b, t, dt, dW_s, params, jx0=None):
    """One Euler step of the reduced mean equation.

    d<J_z>_s = -gamma jx0 exp(-M t/2) b dt + 2 sqrt(M eta) <dJ_z^2>_s dW_s

    ``jx0`` is the initial <J_x>, J for the x-polarized start.  The field
    term has the sign fixed by H = gamma b J_y (see ``control``).  Valid
    only while t << 1/(eta M).
    """
    if jx0 is None:
        jx0 = params.N / 2
    rotation = -params.gamma * jx0 * np.exp(-params.M * t / 2) * b * dt
    return mean + rotation + 2 * np.sqrt(params.M * params.eta) * var * dW_s


@dataclass
class GaussianFilterState:
    """Streaming short-time filter: mean and deterministic variance."""

    mean: float
    var: float
    t: float = 0.0
    var0: float | None = None

    def __post_init__(self):
        if self.var0 is None:
            self.var0 = self.var

    def A(self, M, eta, J):
        return 1 / J + 2 * M * eta * self.t

    def update(self, y_dt, b, dt, params, jx0=None) -> "GaussianFilterState":
        dW_s = short_time_innovation(y_dt, self.mean, dt, params.M, params.eta)
        self.mean = short_time_mean_step(self.mean, self.var, b, self.t, dt, dW_s, params, jx0)
        self.t += dt
        self.var = short_time_variance(self.t, self.var0, params.M, params.eta)
        return self


def integral_estimator(A, B, J):
    """Mean of m under exp(-A m^2 + 2 B m) restricted to [-J, J].

    The integrand is a normal density with centre B/A and variance 1/(2A),
    so this is the mean of a truncated normal.  Broadcasts over A and B.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if np.any(A <= 0):
        raise ValueError("A must be positive")
    loc = B / A
    scale = np.sqrt(0.5 / A)
    out = stats.truncnorm.mean((-J - loc) / scale, (J - loc) / scale, loc=loc, scale=scale)
    return out if out.ndim else float(out)


def integral_coefficients(t, Y, M, eta, J):
    """(A, B) = (1/J + 2 M eta t, 2 M eta Y)."""
    return 1 / J + 2 * M * eta * np.asarray(t), 2 * M * eta * np.asarray(Y)


def current_average(Y, t):
    """Photocurrent average Y / t."""
    if np.any(np.asarray(t) <= 0):
        raise ZeroDivisionError("current average is undefined at t = 0")
    return Y / t


def estimator_error_va(M, eta, t):
    """V_a = 1 / (4 M eta t); infinite when eta = 0."""
    if t <= 0:
        raise ValueError("t must be positive")
    if eta == 0:
        return np.inf
    return 1 / (4 * M * eta * t)


def preparation_time(var_d, var0, M, eta):
    """Average time to reach variance var_d from var0: (1/var_d - 1/var0) / (4 M eta).

    Clamped to zero when var_d >= var0 (already there).
    """
    if var_d <= 0:
        raise ValueError("target variance must be positive")
    if var_d >= var0:
        return 0.0
    return (1 / var_d - 1 / var0) / (4 * M * eta)
