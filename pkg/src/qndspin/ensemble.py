"""Monte Carlo ensembles of conditional trajectories and reference laws.

Trajectories are split into fixed chunks of ``chunk_size`` consecutive
indices.  Chunks are independent work items; workers return per-chunk
summaries and the parent folds them in chunk order with a pairwise
(Chan et al.) mean/variance update.  The chunk layout depends only on
``n_traj`` and ``chunk_size``, never on the worker count, so statistics are
bit-identical for any number of workers.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import filters
from .control import ControllerSpec
from .hilbert import SimParams, coherent_state, levels, spin_operators
from .sde_engine import NoiseStream, StepSizeError, _Model, _advance, simulate_batch

log = logging.getLogger(__name__)

DEFAULT_CHUNK = 500
CONVERGED_VARIANCE = 0.05
QUANTITIES = ("var", "jz", "jz2", "cost", "jz_sq_plus_var", "va")


@dataclass
class RunningMoments:
    """Per-time sample count, mean and sum of squared deviations."""

    n: int
    mean: np.ndarray
    m2: np.ndarray

    @classmethod
    def of(cls, x: np.ndarray) -> "RunningMoments":
        mean = x.mean(axis=0)
        return cls(x.shape[0], mean, ((x - mean) ** 2).sum(axis=0))

    def merge(self, other: "RunningMoments") -> "RunningMoments":
        if self.n == 0:
            return other
        n = self.n + other.n
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.n / n)
        m2 = self.m2 + other.m2 + delta**2 * (self.n * other.n / n)
        return RunningMoments(n, mean, m2)

    @property
    def std_error(self) -> np.ndarray:
        if self.n < 2:
            return np.zeros_like(self.mean)
        return np.sqrt(self.m2 / (self.n - 1) / self.n)


@dataclass
class EnsembleStats:
    params: SimParams
    t: np.ndarray
    mean: dict
    se: dict
    levels: np.ndarray
    histogram: np.ndarray
    convergence_fraction: float
    final_jz: np.ndarray
    final_var: np.ndarray
    final_cost: np.ndarray
    upper_violations: np.ndarray
    lower_violations: np.ndarray
    n_completed: int
    traces: dict = field(default_factory=dict)
    trace_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    failures: list = field(default_factory=list)

    @property
    def partial(self) -> bool:
        return bool(self.failures)

    @property
    def var0(self) -> float:
        return float(self.mean["var"][0])


def final_levels(jz: np.ndarray, N: int) -> np.ndarray:
    """Nearest Dicke level to each final <J_z>."""
    J = N / 2
    return np.clip(np.round(np.asarray(jz) + J), 0, N) - J


def is_converged(jz, var, m_d, N) -> np.ndarray:
    """A trajectory reaches m_d when <dJ_z^2>(T) < 0.05 and <J_z>(T) rounds to m_d."""
    return (np.asarray(var) < CONVERGED_VARIANCE) & (final_levels(jz, N) == m_d)


def variance_lower_bound(t, M, eta):
    return np.exp(-2 * (eta * M * np.asarray(t) - 1)) / 4


def _chunk_summary(params: SimParams, controller: ControllerSpec, start: int, stop: int, n_keep: int):
    indices = np.arange(start, stop)
    try:
        res = simulate_batch(params, indices, controller)
    except StepSizeError as exc:
        return {"start": start, "stop": stop, "error": str(exc),
                "trajectories": None if exc.trajectories is None else list(map(int, exc.trajectories))}
    jz2 = res.var + res.jz**2
    series = {
        "var": res.var,
        "jz": res.jz,
        "jz2": jz2,
        "cost": (res.jz - params.m_d) ** 2 + res.var,
        "jz_sq_plus_var": res.jz**2 + res.var,
    }
    t = res.t
    if params.eta > 0:
        with np.errstate(divide="ignore", invalid="ignore"):
            avg = np.where(t > 0, res.y_int / np.where(t > 0, t, 1), np.nan)
        series["va"] = (avg - res.jz) ** 2 + res.var
    else:
        series["va"] = np.full_like(res.var, np.nan)
    moments = {k: RunningMoments.of(v) for k, v in series.items()}
    keep = max(0, min(n_keep - start, len(indices)))
    traces = {k: getattr(res, k)[:keep].copy() for k in ("jz", "var", "jx", "b", "y_int", "jz_est")}
    lower = variance_lower_bound(t, params.M, params.eta)
    return {
        "start": start, "stop": stop, "t": t, "moments": moments,
        "final_jz": res.jz[:, -1].copy(), "final_var": res.var[:, -1].copy(),
        "upper": (res.var > 0.25).sum(axis=0), "lower": (res.var < lower).sum(axis=0),
        "traces": traces,
    }


def _chunk_task(args):
    return _chunk_summary(*args)


def chunk_ranges(n_traj: int, chunk_size: int) -> list[tuple[int, int]]:
    return [(s, min(s + chunk_size, n_traj)) for s in range(0, n_traj, chunk_size)]


def run_ensemble(params: SimParams, controller: ControllerSpec | None = None, n_workers: int = 1,
                 chunk_size: int = DEFAULT_CHUNK, n_keep: int = 100) -> EnsembleStats:
    """Integrate ``params.n_traj`` trajectories and reduce them to EnsembleStats.

    Trajectory i uses NoiseStream(params.seed, i).  The first ``n_keep``
    trajectories are kept as decimated traces for plotting.  A chunk that
    fails is reported in ``failures`` with its index range and the
    statistics cover the remaining trajectories.
    """
    if controller is None:
        controller = ControllerSpec.from_params(params)
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    tasks = [(params, controller, a, b, n_keep) for a, b in chunk_ranges(params.n_traj, chunk_size)]
    if n_workers <= 1 or len(tasks) == 1:
        summaries = map(_chunk_task, tasks)
        return _reduce(params, summaries)
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        return _reduce(params, pool.map(_chunk_task, tasks))


def _reduce(params: SimParams, summaries) -> EnsembleStats:
    moments = None
    finals_jz, finals_var, failures = [], [], []
    traces: dict[str, list] = {}
    upper = lower = None
    t = None
    kept = []
    for s in summaries:
        if "error" in s:
            log.warning("trajectories %d..%d failed: %s", s["start"], s["stop"] - 1, s["error"])
            failures.append(s)
            continue
        t = s["t"]
        if moments is None:
            moments = s["moments"]
            upper, lower = s["upper"].copy(), s["lower"].copy()
        else:
            moments = {k: moments[k].merge(v) for k, v in s["moments"].items()}
            upper += s["upper"]
            lower += s["lower"]
        finals_jz.append(s["final_jz"])
        finals_var.append(s["final_var"])
        n_tr = len(s["traces"]["jz"])
        if n_tr:
            kept.append(np.arange(s["start"], s["start"] + n_tr))
            for k, v in s["traces"].items():
                traces.setdefault(k, []).append(v)
    if moments is None:
        raise RuntimeError(f"every chunk failed: {[f['error'] for f in failures]}")
    final_jz = np.concatenate(finals_jz)
    final_var = np.concatenate(finals_var)
    lv = levels(params.N)
    fl = final_levels(final_jz, params.N)
    hist = np.array([(fl == m).sum() for m in lv])
    conv = is_converged(final_jz, final_var, params.m_d, params.N).mean()
    return EnsembleStats(
        params=params, t=t,
        mean={k: v.mean for k, v in moments.items()},
        se={k: v.std_error for k, v in moments.items()},
        levels=lv, histogram=hist, convergence_fraction=float(conv),
        final_jz=final_jz, final_var=final_var, final_cost=(final_jz - params.m_d) ** 2 + final_var,
        upper_violations=upper, lower_violations=lower, n_completed=len(final_jz),
        traces={k: np.concatenate(v) for k, v in traces.items()},
        trace_indices=np.concatenate(kept) if kept else np.zeros(0, dtype=int),
        failures=failures,
    )


# Reference laws ------------------------------------------------------------

def unconditional_moments(theta, N, M, t) -> dict:
    """Closed-form eta = 0 moments of a coherent state tilted by theta from +z in the x-z plane."""
    t = np.asarray(t, dtype=float)
    s2 = np.sin(theta) ** 2
    e1, e2 = np.exp(-M * t), np.exp(-2 * M * t)
    one = np.ones_like(t)
    return {
        "jx": np.sin(theta) * np.exp(-M * t / 2) * N / 2,
        "jy": 0.0 * one,
        "jz": np.cos(theta) * N / 2 * one,
        "var_x": s2 * (N**2 - N - 2 * N**2 * e1 + (N**2 - N) * e2) / 8 + N / 4,
        "var_y": s2 * (N**2 - N + (N - N**2) * e2) / 8 + N / 4,
        "var_z": s2 * N / 4 * one,
    }


def simulate_unconditional(theta, N, M, T, dt, record_every=10, scheme="pc") -> tuple[np.ndarray, dict]:
    """Integrate the eta = 0 master equation and return the same six moments."""
    params = SimParams(N=N, M=M, eta=0.0, dt=dt, T=T, theta=theta, record_every=record_every, scheme=scheme)
    ops = spin_operators(N)
    model = _Model(params, pure=False)
    psi = coherent_state(N, theta)
    rho = np.outer(psi, psi.conj())[None]
    zero = np.zeros(1)
    out = {k: [] for k in ("jx", "jy", "jz", "var_x", "var_y", "var_z")}
    times = []

    def measure(r):
        for name, op in (("x", ops.jx), ("y", ops.jy), ("z", ops.jz)):
            mean = np.trace(op @ r).real
            out["j" + name].append(mean)
            out["var_" + name].append(np.trace(op @ op @ r).real - mean**2)

    for k in range(params.n_steps + 1):
        if k % record_every == 0 or k == params.n_steps:
            measure(rho[0])
            times.append(k * dt)
        if k < params.n_steps:
            rho = _advance(model, rho, zero, zero, k)
    return np.array(times), {k: np.array(v) for k, v in out.items()}


def average_variance_bound(t, var0, M, eta):
    """var0 / (1 + 4 M eta var0 t): upper bound on E[<dJ_z^2>(t)]."""
    return filters.short_time_variance(t, var0, M, eta)


# Checks --------------------------------------------------------------------

@dataclass
class CheckReport:
    passed: bool
    violations: dict
    details: dict = field(default_factory=dict)

    def lines(self) -> list[str]:
        out = []
        for name, bad in self.violations.items():
            status = "ok" if len(bad) == 0 else f"violated at {len(bad)} time index(es), first {list(bad[:5])}"
            out.append(f"{name}: {status}")
        for name, value in self.details.items():
            out.append(f"{name}: {value}")
        return out


def check_martingales(stats: EnsembleStats, n_sigma: float = 3.0, atol: float = 1e-9) -> CheckReport:
    """Open-loop martingale checks at every recorded time.

    * |E[<J_z^n>(t)] - <J_z^n>(0)| <= n_sigma SE for n = 1, 2
    * E[<dJ_z^2>] nonincreasing: E(t_k+1) - E(t_k) <= n_sigma SE(t_k+1)
    * E[<J_z>^2 + <dJ_z^2>] constant within n_sigma SE
    """
    mean, se = stats.mean, stats.se
    viol = {}
    for name in ("jz", "jz2", "jz_sq_plus_var"):
        dev = np.abs(mean[name] - mean[name][0])
        viol[name] = np.flatnonzero(dev > n_sigma * se[name] + atol)
    rise = np.diff(mean["var"])
    viol["var_nonincreasing"] = np.flatnonzero(rise > n_sigma * se["var"][1:] + atol) + 1
    passed = all(len(v) == 0 for v in viol.values())
    return CheckReport(passed, viol, {"max |E[Jz]|/SE": _max_ratio(mean["jz"] - mean["jz"][0], se["jz"])})


def _max_ratio(dev, se):
    ok = se > 0
    return float(np.max(np.abs(dev[ok]) / se[ok])) if ok.any() else 0.0


def check_average_variance(stats: EnsembleStats, n_sigma: float = 3.0) -> CheckReport:
    p = stats.params
    bound = average_variance_bound(stats.t, stats.var0, p.M, p.eta) if stats.var0 > 0 else np.zeros_like(stats.t)
    bad = np.flatnonzero(stats.mean["var"] > bound + n_sigma * stats.se["var"] + 1e-12)
    return CheckReport(len(bad) == 0, {"average variance bound": bad})


@dataclass
class VarianceBoundsReport:
    n_samples: int
    frac_above_upper: float
    frac_below_lower: float
    passed: bool

    def lines(self) -> list[str]:
        return [f"samples: {self.n_samples}",
                f"fraction above 1/4: {self.frac_above_upper:.5f} (limit 0.001)",
                f"fraction below exp[-2(eta M t - 1)]/4: {self.frac_below_lower:.5f} (limit 0.01)"]


def variance_bounds_check(source, t_check: float | None = None, t_max: float | None = None,
                          M: float = 1.0, eta: float = 1.0,
                          upper_limit: float = 0.001, lower_limit: float = 0.01) -> VarianceBoundsReport:
    """Fraction of (trajectory, time) samples with t_check <= t <= t_max outside
    exp[-2(eta M t - 1)]/4 < <dJ_z^2> <= 1/4.

    ``source`` is EnsembleStats (M and eta are then taken from its
    parameters) or an iterable of TrajectoryRecord.  ``t_check`` defaults
    to 2/(eta M).
    """
    if isinstance(source, EnsembleStats):
        M, eta = source.params.M, source.params.eta
    t_check = 2 / (eta * M) if t_check is None else t_check
    t_max = np.inf if t_max is None else t_max

    def window(t):
        return (t >= t_check - 1e-12) & (t <= t_max + 1e-12)

    if isinstance(source, EnsembleStats):
        sel = window(source.t)
        n = source.n_completed * int(sel.sum())
        up = int(source.upper_violations[sel].sum())
        lo = int(source.lower_violations[sel].sum())
    else:
        n = up = lo = 0
        for r in source:
            sel = window(r.t)
            v = r.var[sel]
            n += v.size
            up += int((v > 0.25).sum())
            lo += int((v < variance_lower_bound(r.t[sel], M, eta)).sum())
    frac_up = up / n if n else 0.0
    frac_lo = lo / n if n else 0.0
    return VarianceBoundsReport(n, frac_up, frac_lo, frac_up <= upper_limit and frac_lo <= lower_limit)


def total_variation(hist_counts, probabilities) -> float:
    freq = np.asarray(hist_counts, dtype=float)
    freq = freq / freq.sum()
    return 0.5 * float(np.abs(freq - np.asarray(probabilities)).sum())


def prior_level_distribution(params: SimParams) -> np.ndarray:
    return np.abs(coherent_state(params.N, params.theta)) ** 2


def two_level_reduction(p0: float, M: float, dt: float, T: float, noise) -> np.ndarray:
    """Integrate dp = -2 sqrt(M) p (1 - p) dW, the SSE restricted to two adjacent levels.

    ``noise`` is a NoiseStream or an array of increments.  Uses the same
    derivative-free predictor-corrector as the full model (zero drift), with
    p clipped to [0, 1].
    """
    if not 0 <= p0 <= 1:
        raise ValueError("p0 must lie in [0, 1]")
    n = int(round(T / dt))
    dW = noise.increments(n, dt) if isinstance(noise, NoiseStream) else np.asarray(noise, dtype=float)[:n]
    if len(dW) < n:
        raise ValueError(f"need {n} increments, got {len(dW)}")
    coef = -2 * np.sqrt(M)
    sq = np.sqrt(dt)
    p = np.empty(n + 1)
    p[0] = p0
    for k in range(n):
        x = p[k]
        b0 = coef * x * (1 - x)
        up, um = x + b0 * sq, x - b0 * sq
        bp, bm = coef * up * (1 - up), coef * um * (1 - um)
        w = dW[k]
        x = x + 0.25 * (bp + bm + 2 * b0) * w + 0.25 * (bp - bm) * (w * w - dt) / sq
        p[k + 1] = min(max(x, 0.0), 1.0)
    return p


def adjacent_pair(populations: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Lower index k of the most populated adjacent pair (k, k+1) and that pair's total weight.

    Works on (..., d) population arrays.
    """
    pair = populations[..., :-1] + populations[..., 1:]
    k = pair.argmax(axis=-1)
    return k, np.take_along_axis(pair, k[..., None], axis=-1)[..., 0]


def pair_share(populations: np.ndarray, k) -> np.ndarray:
    """Upper-level share p_{k+1} / (p_k + p_{k+1}): the state projected onto the pair (k, k+1)."""
    k = np.asarray(k)[..., None]
    lo = np.take_along_axis(populations, k, axis=-1)[..., 0]
    hi = np.take_along_axis(populations, k + 1, axis=-1)[..., 0]
    return hi / (lo + hi)
