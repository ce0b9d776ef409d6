"""Conditional evolution under continuous J_z measurement.

Pure states (eta = 1) follow the norm-preserving nonlinear SSE

    d psi = (-i H - M (J_z - <J_z>)^2 / 2) psi dt + sqrt(M) (J_z - <J_z>) psi dW

and mixed states the SME

    d rho = -i[H, rho] dt + D[sqrt(M) J_z] rho dt + sqrt(eta) H[sqrt(M) J_z] rho dW

with H = gamma b J_y and the photocurrent y dt = <J_z> dt + dW / (2 sqrt(M eta)).
All SDEs are Ito.

The integrators operate on a batch of trajectories at once (leading axis).
Every trajectory owns an independent noise stream keyed by
(seed, trajectory_index), and no arithmetic mixes rows, so a trajectory's
result does not depend on which other trajectories share its batch
apart from BLAS kernel choice, which the ensemble runner pins by fixing the
chunk layout.

Predictor-corrector steps apply the field rotation exp(-i gamma b J_y dt/2)
exactly on both sides of the measurement update (Strang splitting).  The
Euler-Maruyama scheme keeps -iH inside the drift and serves as the
convergence reference.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import filters
from .control import ControllerSpec, feedback_field, jx_and_correlator
from .hilbert import SimParams, coherent_state, spin_operators

NORM_TOLERANCE = 1e-3
POSITIVITY_TOLERANCE = 1e-8


class StepSizeError(RuntimeError):
    """A step left the state too far from the physical manifold."""

    def __init__(self, message, step=None, trajectories=None):
        super().__init__(message)
        self.step = step
        self.trajectories = trajectories


class NoiseStream:
    """Wiener increments for one trajectory, fully determined by (seed, index)."""

    def __init__(self, seed: int, trajectory_index: int):
        self.seed = int(seed)
        self.trajectory_index = int(trajectory_index)
        seq = np.random.SeedSequence(self.seed, spawn_key=(self.trajectory_index,))
        self._rng = np.random.Generator(np.random.PCG64(seq))

    def increments(self, n: int, dt: float) -> np.ndarray:
        """Next ``n`` increments dW ~ Normal(0, dt)."""
        return self._rng.standard_normal(n) * np.sqrt(dt)


def noise_matrix(seed: int, indices, n_steps: int, dt: float) -> np.ndarray:
    """Increments for several trajectories, shape (n_steps, len(indices))."""
    cols = [NoiseStream(seed, i).increments(n_steps, dt) for i in indices]
    return np.stack(cols, axis=1) if cols else np.zeros((n_steps, 0))


@lru_cache(maxsize=32)
def _jy_eigensystem(N: int):
    vals, vecs = np.linalg.eigh(spin_operators(N).jy)
    vals.setflags(write=False)
    vecs.setflags(write=False)
    return vals, vecs


def rotate_y(states: np.ndarray, angle, pure: bool) -> np.ndarray:
    """Apply exp(-i angle J_y) to a batch of states (per-row angles).

    The rotation matrix is real, so real input stays real.
    """
    d = states.shape[-1]
    vals, vecs = _jy_eigensystem(d - 1)
    phases = np.exp(-1j * np.asarray(angle, dtype=float)[:, None] * vals)  # (B, d)
    if pure:
        out = ((states @ vecs.conj()) * phases) @ vecs.T
    else:
        # U rho U^dag with U = V diag(phases) V^dag
        inner = vecs.conj().T @ states @ vecs
        inner = inner * phases[:, :, None] * phases.conj()[:, None, :]
        out = vecs @ inner @ vecs.conj().T
    return out.real if not np.iscomplexobj(states) else out


# Batched coefficient functions.  ``mu`` is always recomputed from the
# argument so that predictor stages see their own <J_z>.

def _mean_jz_pure(psi, m):
    p = psi.real**2 + psi.imag**2
    return (p @ m) / p.sum(axis=-1)


def _mean_jz_mixed(rho, m):
    p = np.diagonal(rho, axis1=-2, axis2=-1).real
    return (p @ m) / p.sum(axis=-1)


class _Model:
    """Drift and diffusion of the measurement part for one parameter set."""

    def __init__(self, params: SimParams, pure: bool):
        self.params = params
        self.pure = pure
        ops = spin_operators(params.N)
        self.m = ops.m
        self.jy = ops.jy
        self.M = params.M
        self.eta = params.eta
        self.gamma = params.gamma
        self.dt = params.dt
        if pure:
            self.mean_jz = lambda s: _mean_jz_pure(s, self.m)
        else:
            self.mean_jz = lambda s: _mean_jz_mixed(s, self.m)
            m = self.m
            self._dephase = -0.5 * self.M * (m[:, None] - m[None, :]) ** 2
            self._msum = m[:, None] + m[None, :]

    def drift(self, s):
        if self.pure:
            dz = self.m - self.mean_jz(s)[:, None]
            return -0.5 * self.M * dz * dz * s
        return self._dephase * s

    def diffusion(self, s):
        if self.pure:
            return np.sqrt(self.M) * (self.m - self.mean_jz(s)[:, None]) * s
        mu = self.mean_jz(s)
        return np.sqrt(self.eta * self.M) * (self._msum - 2 * mu[:, None, None]) * s

    def hamiltonian_drift(self, s, b):
        h = self.gamma * np.asarray(b, dtype=float)
        if self.pure:
            return -1j * h[:, None] * (s @ self.jy.T)
        comm = self.jy @ s - s @ self.jy
        return -1j * h[:, None, None] * comm

    def _expand(self, v):
        return v[:, None] if self.pure else v[:, None, None]

    def predictor_corrector(self, s, dW):
        """Derivative-free weak order-2 predictor-corrector step of the measurement part.

        Corrector:  Y' = Y + (a(Ybar) + a(Y)) dt/2 + Psi
        Predictor:  Ybar = Y + (a(U) + a(Y)) dt/2 + Psi
        Psi = (b(U+) + b(U-) + 2 b) dW/4 + (b(U+) - b(U-)) (dW^2 - dt) / (4 sqrt(dt))
        U = Y + a dt + b dW,  U+- = Y + a dt +- b sqrt(dt)
        """
        dt = self.dt
        sq = np.sqrt(dt)
        a0 = self.drift(s)
        b0 = self.diffusion(s)
        if not self.pure and self.eta == 0:
            support = s + a0 * dt
            pred = s + 0.5 * (self.drift(support) + a0) * dt
            return s + 0.5 * (self.drift(pred) + a0) * dt
        w = self._expand(dW)
        base = s + a0 * dt
        bp = self.diffusion(base + b0 * sq)
        bm = self.diffusion(base - b0 * sq)
        psi_term = 0.25 * (bp + bm + 2 * b0) * w + 0.25 * (bp - bm) * ((w * w - dt) / sq)
        support = base + b0 * w
        pred = s + 0.5 * (self.drift(support) + a0) * dt + psi_term
        return s + 0.5 * (self.drift(pred) + a0) * dt + psi_term

    def euler(self, s, b, dW):
        inc = (self.drift(s) + self.hamiltonian_drift(s, b)) * self.dt
        if self.pure or self.eta > 0:
            inc = inc + self.diffusion(s) * self._expand(dW)
        return s + inc


def _normalize(s, pure):
    if pure:
        norm = np.sqrt((s.real**2 + s.imag**2).sum(axis=-1))
        return s / norm[:, None], norm
    tr = np.trace(s, axis1=-2, axis2=-1).real
    return s / tr[:, None, None], tr


MAX_REFINEMENT = 8


def _step_violations(model: _Model, new, size):
    if model.params.scheme != "pc":
        return np.zeros(len(size), dtype=bool)
    if model.pure:
        return np.abs(size - 1) > NORM_TOLERANCE
    p = np.diagonal(new, axis1=-2, axis2=-1).real
    return (p < -POSITIVITY_TOLERANCE).any(axis=-1)


def _raw_step(model: _Model, s, b, dW):
    params = model.params
    if params.scheme == "euler":
        new = model.euler(s, b, dW)
    else:
        rotate = np.any(b != 0)
        half = 0.5 * params.gamma * b * params.dt
        if rotate:
            s = rotate_y(s, half, model.pure)
        new = model.predictor_corrector(s, dW)
        if rotate:
            new = rotate_y(new, half, model.pure)
    return _normalize(new, model.pure)


def _bridge_midpoint(seed, index, step, depth, branch, dW, dt):
    rng = np.random.default_rng([int(seed), int(index), int(step), depth, branch])
    return 0.5 * dW + 0.5 * np.sqrt(dt) * rng.standard_normal()


def _advance(model: _Model, s, b, dW, step_index, indices=None, depth=0, branch=0):
    """One full step (field + measurement) on a batch; returns the normalized state.

    A predictor-corrector step whose pre-normalization norm drifts by more
    than NORM_TOLERANCE (or, for density matrices, that produces a negative
    population) is rejected and redone as two half steps, with the midpoint
    of the Wiener path drawn from a Brownian bridge.  The bridge draw is
    keyed by (seed, trajectory, step, depth, branch), so refinement is
    reproducible and independent of batching.
    """
    new, size = _raw_step(model, s, b, dW)
    bad = np.flatnonzero(_step_violations(model, new, size))
    if bad.size == 0:
        return new
    if indices is None:
        indices = np.arange(len(size))
    if depth >= MAX_REFINEMENT:
        kind = "norm drift" if model.pure else "negative population"
        raise StepSizeError(f"{kind} persists after {depth} refinements at step {step_index}",
                            step=step_index, trajectories=indices[bad])
    params = model.params
    half_model = _Model(params.replace(dt=params.dt / 2), model.pure)
    w1 = np.array([_bridge_midpoint(params.seed, indices[i], step_index, depth, branch, dW[i], params.dt)
                   for i in bad])
    w2 = dW[bad] - w1
    mid = _advance(half_model, s[bad], b[bad], w1, step_index, indices[bad], depth + 1, 2 * branch)
    new[bad] = _advance(half_model, mid, b[bad], w2, step_index, indices[bad], depth + 1, 2 * branch + 1)
    return new


# Single-state operations ---------------------------------------------------

def _single_params(params: SimParams, **over) -> SimParams:
    return params.replace(**over) if over else params


def sse_drift_diffusion(psi: np.ndarray, b: float, params: SimParams):
    """Drift (-iH - M (J_z - <J_z>)^2 / 2) psi and diffusion sqrt(M) (J_z - <J_z>) psi."""
    model = _Model(params, pure=True)
    s = np.asarray(psi)[None, :]
    bb = np.array([b], dtype=float)
    drift = model.drift(s) + model.hamiltonian_drift(s, bb)
    return drift[0], model.diffusion(s)[0]


def sme_increment(rho: np.ndarray, b: float, dW: float, params: SimParams) -> np.ndarray:
    """One Euler update of the SME, renormalized to unit trace.

    Raises StepSizeError when a population falls below -1e-8, the same
    test the integrator applies.
    """
    model = _Model(params, pure=False)
    s = np.asarray(rho, dtype=complex)[None]
    new = model.euler(s, np.array([b], dtype=float), np.array([dW]))[0]
    new = new / np.trace(new).real
    if np.diagonal(new).real.min() < -POSITIVITY_TOLERANCE:
        raise StepSizeError("SME step produced a negative population; reduce dt")
    return new


def photocurrent_increment(state: np.ndarray, dW: float, params: SimParams) -> float:
    """y dt = <J_z> dt + dW / (2 sqrt(M eta)).  Undefined for eta = 0."""
    if params.eta == 0:
        raise ValueError("eta = 0: the record carries no information, no photocurrent is defined")
    state = np.asarray(state)
    m = spin_operators(params.N).m
    mu = _mean_jz_pure(state[None], m)[0] if state.ndim == 1 else _mean_jz_mixed(state[None], m)[0]
    return float(mu * params.dt + dW / (2 * np.sqrt(params.M * params.eta)))


def step_predictor_corrector(state: np.ndarray, b: float, dW: float, params: SimParams) -> np.ndarray:
    """One predictor-corrector step of a single SSE (vector) or SME (matrix) state."""
    state = np.asarray(state)
    pure = state.ndim == 1
    model = _Model(_single_params(params, scheme="pc"), pure)
    out = _advance(model, state[None], np.array([b], dtype=float), np.array([dW]), 0)
    return out[0]


def step_euler_maruyama(state: np.ndarray, b: float, dW: float, params: SimParams) -> np.ndarray:
    state = np.asarray(state)
    pure = state.ndim == 1
    model = _Model(_single_params(params, scheme="euler"), pure)
    return _advance(model, state[None], np.array([b], dtype=float), np.array([dW]), 0)[0]


# Trajectory integration ----------------------------------------------------

@dataclass
class PhotocurrentRecord:
    """Full-resolution record: increments y_k dt and running integral Y_k."""

    increments: np.ndarray
    innovations: np.ndarray
    predicted_jz: np.ndarray

    @property
    def integral(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.increments)])


@dataclass
class TrajectoryRecord:
    """Decimated time series of one trajectory plus its exact final state."""

    t: np.ndarray
    jz: np.ndarray
    var: np.ndarray
    jx: np.ndarray
    b: np.ndarray
    y_int: np.ndarray
    jz_est: np.ndarray
    populations: np.ndarray
    final_state: np.ndarray
    photocurrent: PhotocurrentRecord | None = None
    index: int = 0


@dataclass
class BatchResult:
    """Decimated series for a batch, arrays shaped (B, n_recorded)."""

    indices: np.ndarray
    t: np.ndarray
    jz: np.ndarray
    var: np.ndarray
    jx: np.ndarray
    corr: np.ndarray
    b: np.ndarray
    y_int: np.ndarray
    jz_est: np.ndarray
    final_states: np.ndarray
    populations: np.ndarray | None = None
    photocurrent: list[PhotocurrentRecord] | None = field(default=None, repr=False)


def recorded_steps(params: SimParams) -> np.ndarray:
    n = params.n_steps
    steps = np.arange(0, n + 1, params.record_every)
    if steps[-1] != n:
        steps = np.append(steps, n)
    return steps


def initial_state(params: SimParams, pure: bool, batch: int) -> np.ndarray:
    psi = coherent_state(params.N, params.theta)
    if np.allclose(psi.imag, 0):
        psi = psi.real
    if pure:
        return np.tile(psi, (batch, 1))
    return np.tile(np.outer(psi, psi.conj()), (batch, 1, 1))


def uses_pure_states(params: SimParams, representation: str = "auto") -> bool:
    if representation == "auto":
        return params.eta == 1.0
    if representation == "sse":
        if params.eta != 1.0:
            raise ValueError("the SSE needs eta = 1; use the SME for eta < 1")
        return True
    if representation == "sme":
        return False
    raise ValueError(f"representation must be auto, sse or sme, got {representation!r}")


class _EstimatorTracker:
    """Runs the requested reduced estimator alongside the full filter."""

    def __init__(self, kind, params: SimParams, prior_populations, batch):
        self.kind = kind
        self.params = params
        self.prior = prior_populations
        m = spin_operators(params.N).m
        mean0 = prior_populations @ m
        self.mean0 = mean0
        self.var0 = prior_populations @ (m * m) - mean0**2
        self.jx0 = float(np.real(np.vdot(coherent_state(params.N, params.theta),
                                         spin_operators(params.N).jx @ coherent_state(params.N, params.theta))))
        self.short_mean = np.full(batch, mean0)
        self.short_var = self.var0

    def advance(self, t, y_dt, b):
        # t is the time at the start of the step
        if self.kind != "short_time" or self.params.eta == 0:
            return
        p = self.params
        dW_s = filters.short_time_innovation(y_dt, self.short_mean, p.dt, p.M, p.eta)
        self.short_mean = filters.short_time_mean_step(self.short_mean, self.short_var, b, t, p.dt,
                                                       dW_s, p, self.jx0)
        if self.short_var > 0:
            self.short_var = filters.short_time_variance(t + p.dt, self.var0, p.M, p.eta)

    def estimate(self, t, Y, full_jz):
        p = self.params
        if self.kind == "full" or p.eta == 0:
            return full_jz
        if self.kind == "analytic":
            return filters.analytic_expectation(self.prior, t, Y, p.M, p.eta)
        if self.kind == "short_time":
            return self.short_mean.copy()
        if self.kind == "integral":
            A, B = filters.integral_coefficients(t, Y, p.M, p.eta, p.J)
            return filters.integral_estimator(np.full_like(Y, A), B, p.J)
        if t == 0:
            return np.full_like(Y, self.mean0)
        return filters.current_average(Y, t)


def simulate_batch(params: SimParams, indices, controller: ControllerSpec | None = None,
                   estimator: str | None = None, photocurrent: np.ndarray | None = None,
                   noise: np.ndarray | None = None, representation: str = "auto",
                   keep_populations: bool = False, keep_photocurrent: bool = False) -> BatchResult:
    """Integrate trajectories ``indices`` from the coherent state at ``theta`` to T.

    Simulation mode draws dW from each trajectory's NoiseStream (or takes
    ``noise``, shape (n_steps, B)) and forms the photocurrent from it.
    Filtering mode takes ``photocurrent`` increments y_k dt, shape
    (n_steps, B), and derives the innovation from them.  In both modes the
    state is driven by dW = 2 sqrt(M eta) (y dt - <J_z> dt) computed from the
    stored photocurrent, so replaying a record reproduces the run exactly.
    """
    indices = np.asarray(indices, dtype=int)
    B = len(indices)
    if controller is None:
        controller = ControllerSpec.from_params(params)
    estimator = estimator or params.estimator
    if controller.kind == "law1" and estimator != "full":
        raise ValueError("control law 1 needs the full conditional state; use estimator='full'")
    pure = uses_pure_states(params, representation)
    model = _Model(params, pure)
    ops = spin_operators(params.N)
    m = ops.m
    n = params.n_steps
    dt = params.dt
    c_meas = 2 * np.sqrt(params.M * params.eta)

    if params.eta > 0 and photocurrent is None and noise is None:
        noise = noise_matrix(params.seed, indices, n, dt)
    if photocurrent is not None:
        photocurrent = np.asarray(photocurrent, dtype=float).reshape(n, B)
        if params.eta == 0:
            raise ValueError("eta = 0: a photocurrent cannot condition the state")

    s = initial_state(params, pure, B)
    prior = np.abs(coherent_state(params.N, params.theta)) ** 2
    tracker = _EstimatorTracker(estimator, params, prior, B)

    steps = recorded_steps(params)
    n_rec = len(steps)
    out = {k: np.empty((B, n_rec)) for k in ("jz", "var", "jx", "corr", "b", "y_int", "jz_est")}
    pops = np.empty((B, n_rec, params.N + 1)) if keep_populations else None
    if keep_photocurrent:
        full_dy = np.empty((n, B))
        full_dw = np.empty((n, B))
        full_mu = np.empty((n, B))

    Y = np.zeros(B)
    rec = 0
    b = np.zeros(B)
    nan_record = params.eta == 0

    def record(k_rec, state, b_now, t_now):
        p = state.real**2 + state.imag**2 if pure else np.diagonal(state, axis1=-2, axis2=-1).real
        p = p / p.sum(axis=-1, keepdims=True)
        mu = p @ m
        out["jz"][:, k_rec] = mu
        out["var"][:, k_rec] = p @ (m * m) - mu**2
        jx, corr = jx_and_correlator(state, pure)
        out["jx"][:, k_rec] = jx
        out["corr"][:, k_rec] = corr
        out["b"][:, k_rec] = b_now
        out["y_int"][:, k_rec] = np.nan if nan_record else Y
        out["jz_est"][:, k_rec] = tracker.estimate(t_now, Y, mu)
        if pops is not None:
            pops[:, k_rec] = p

    for k in range(n):
        t = k * dt
        if controller.kind == "none":
            b = np.zeros(B)
        else:
            est = None
            if estimator != "full" and controller.kind == "law2":
                est = tracker.estimate(t, Y, model.mean_jz(s))
            b = feedback_field(s, controller, pure, jz_estimate=est)
        if rec < n_rec and steps[rec] == k:
            record(rec, s, b, t)
            rec += 1
        if params.eta > 0:
            mu = model.mean_jz(s)
            if photocurrent is None:
                y_dt = mu * dt + noise[k] / c_meas
            else:
                y_dt = photocurrent[k]
            dW = c_meas * (y_dt - mu * dt)
            Y = Y + y_dt
            tracker.advance(t, y_dt, b)
            if keep_photocurrent:
                full_dy[k], full_dw[k], full_mu[k] = y_dt, dW, mu
        else:
            dW = np.zeros(B)
        s = _advance(model, s, b, dW, k, indices)
    if rec < n_rec:
        if controller.kind != "none":
            est = None
            if estimator != "full" and controller.kind == "law2":
                est = tracker.estimate(n * dt, Y, model.mean_jz(s))
            b = feedback_field(s, controller, pure, jz_estimate=est)
        record(rec, s, b, n * dt)

    photo = None
    if keep_photocurrent and params.eta > 0:
        photo = [PhotocurrentRecord(full_dy[:, i].copy(), full_dw[:, i].copy(), full_mu[:, i].copy())
                 for i in range(B)]
    return BatchResult(indices=indices, t=steps * dt, final_states=s, populations=pops,
                       photocurrent=photo, **out)


def simulate_trajectory(params: SimParams, controller: ControllerSpec | None = None,
                        estimator: str | None = None, noise: NoiseStream | None = None,
                        photocurrent: np.ndarray | None = None,
                        representation: str = "auto") -> TrajectoryRecord:
    """Integrate one trajectory and return its full record.

    ``noise`` defaults to the stream for (params.seed, 0); the result is a
    deterministic function of (params, seed, trajectory index).
    """
    index = 0 if noise is None else noise.trajectory_index
    raw = None
    if photocurrent is None and params.eta > 0:
        stream = noise if noise is not None else NoiseStream(params.seed, index)
        raw = stream.increments(params.n_steps, params.dt)[:, None]
    res = simulate_batch(params, [index], controller, estimator,
                         photocurrent=None if photocurrent is None else np.asarray(photocurrent)[:, None],
                         noise=raw, representation=representation, keep_populations=True,
                         keep_photocurrent=True)
    return TrajectoryRecord(
        t=res.t, jz=res.jz[0], var=res.var[0], jx=res.jx[0], b=res.b[0], y_int=res.y_int[0],
        jz_est=res.jz_est[0], populations=res.populations[0], final_state=res.final_states[0],
        photocurrent=res.photocurrent[0] if res.photocurrent else None, index=index)
