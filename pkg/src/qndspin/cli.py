"""Scenario runner: ``qndspin run | verify | list-scenarios``.

Named scenarios fix N=10, M=1, T=5, dt=1e-3 and pick the controller:

    fig1  one open-loop trajectory (populations, moments, photocurrent)
    fig2  open-loop ensemble
    fig3  control law 1, lambda = 10
    fig4  control law 2, lambda = 10
    custom  everything from flags / config file

Configuration files are flat ``key = value`` text using SimParams field
names (``lambda`` is accepted for ``lam``) plus ``scenario``, ``out``,
``chunk_size`` and ``n_keep``.  Command-line flags override the file.

Exit codes: 0 success, 1 validation or input error, 2 acceptance failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import shutil
import sys
import tempfile
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .control import ControllerSpec
from .ensemble import (
    DEFAULT_CHUNK, EnsembleStats, check_average_variance, check_martingales, prior_level_distribution,
    run_ensemble, total_variation, variance_bounds_check,
)
from .filters import estimator_error_va
from .hilbert import SimParams, coherent_state, spin_operators
from .sde_engine import NoiseStream, simulate_trajectory

log = logging.getLogger(__name__)

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2

BASE = dict(N=10, M=1.0, eta=1.0, T=5.0, dt=1e-3, lam=10.0, m_d=0.0, theta=math.pi / 2)
SCENARIOS = {
    "fig1": dict(BASE, n_traj=1, controller="none"),
    "fig2": dict(BASE, n_traj=10_000, controller="none"),
    "fig3": dict(BASE, n_traj=10_000, controller="law1"),
    "fig4": dict(BASE, n_traj=10_000, controller="law2"),
}
DESCRIPTIONS = {
    "fig1": "single open-loop trajectory: level populations, <J_z> and variance, photocurrent",
    "fig2": "open-loop ensemble: martingales, variance bounds, projection statistics",
    "fig3": "feedback law 1 (correlator law), lambda = 10",
    "fig4": "feedback law 2 (<J_z> law), lambda = 10",
    "custom": "all parameters from flags or config file",
}
CUSTOM_REQUIRED = ("N", "M", "eta", "dt", "T", "n_traj", "controller")
RUN_KEYS = ("scenario", "out", "chunk_size", "n_keep")
ALIASES = {"lambda": "lam"}

TRAJECTORY_COLUMNS = ("t", "traj_id", "jz_mean", "jz_var", "jx_mean", "b", "y_int")
ENSEMBLE_COLUMNS = ("t", "e_var", "e_jz", "e_jz2", "e_cost", "se_var", "se_jz", "se_jz2", "se_cost")


class ConfigError(ValueError):
    """Invalid or incomplete configuration."""


@dataclass(frozen=True)
class Scenario:
    """A fully resolved run: scenario name, parameters and output layout."""

    name: str
    params: SimParams
    out: str = "out"
    chunk_size: int = DEFAULT_CHUNK
    n_keep: int = 100

    def to_manifest(self) -> dict:
        return {
            "scenario": self.name,
            "params": asdict(self.params),
            "seed": self.params.seed,
            "out": self.out,
            "chunk_size": self.chunk_size,
            "n_keep": self.n_keep,
            "code_version": __version__,
        }

    @classmethod
    def from_manifest(cls, data: dict) -> "Scenario":
        return cls(data["scenario"], SimParams(**data["params"]), data["out"],
                   int(data["chunk_size"]), int(data["n_keep"]))


# Configuration -------------------------------------------------------------

_FIELD_TYPES = {f.name: f.type for f in fields(SimParams)}


def _coerce(key: str, value):
    if not isinstance(value, str):
        return value
    kind = _FIELD_TYPES.get(key, "str") if key not in ("chunk_size", "n_keep") else "int"
    try:
        if kind == "int":
            as_float = float(value)
            if as_float != int(as_float):
                raise ValueError
            return int(as_float)
        if kind == "float":
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind}, got {value!r}") from None
    return value


def read_config_file(path) -> dict:
    """Parse a flat ``key = value`` file; '#' starts a comment."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[ALIASES.get(key, key)] = value
    return values


def parse_config(args: dict, file=None) -> Scenario:
    """Resolve a Scenario from flag values and an optional config file.

    ``args`` maps keys (SimParams fields or run keys) to values; entries
    that are None are ignored.  Flags override the file, which overrides
    the named scenario's defaults.
    """
    merged = read_config_file(file) if file else {}
    merged.update({ALIASES.get(k, k): v for k, v in args.items() if v is not None})
    allowed = set(SimParams.field_names()) | set(RUN_KEYS)
    unknown = sorted(set(merged) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s): {', '.join(unknown)}; allowed: {', '.join(sorted(allowed))}")
    merged = {k: _coerce(k, v) for k, v in merged.items()}

    name = merged.pop("scenario", "custom")
    if name not in SCENARIOS and name != "custom":
        raise ConfigError(f"unknown scenario {name!r}; choose from {', '.join(list(SCENARIOS) + ['custom'])}")
    run = {k: merged.pop(k) for k in ("out", "chunk_size", "n_keep") if k in merged}
    if name == "custom":
        missing = [k for k in CUSTOM_REQUIRED if k not in merged]
        if missing:
            raise ConfigError(f"custom scenario needs: {', '.join(CUSTOM_REQUIRED)} (missing: {', '.join(missing)})")
        values = dict(merged)
    else:
        values = dict(SCENARIOS[name], **merged)
    try:
        params = SimParams(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    chunk = int(run.get("chunk_size", DEFAULT_CHUNK))
    n_keep = int(run.get("n_keep", 100))
    if chunk < 1 or n_keep < 0:
        raise ConfigError("chunk_size must be >= 1 and n_keep >= 0")
    return Scenario(name, params, str(run.get("out", f"out/{name}")), chunk, n_keep)


# Output --------------------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_trajectories(path, t, traj_ids, traces):
    rows = []
    for i, tid in enumerate(traj_ids):
        for k in range(len(t)):
            rows.append((t[k], int(tid), traces["jz"][i, k], traces["var"][i, k], traces["jx"][i, k],
                         traces["b"][i, k], traces["y_int"][i, k]))
    _write_csv(path, TRAJECTORY_COLUMNS, rows)


def write_ensemble(path, stats: EnsembleStats):
    mean, se = stats.mean, stats.se
    cols = [stats.t, mean["var"], mean["jz"], mean["jz2"], mean["cost"],
            se["var"], se["jz"], se["jz2"], se["cost"]]
    _write_csv(path, ENSEMBLE_COLUMNS, zip(*cols))


def write_histogram(path, stats: EnsembleStats):
    _write_csv(path, ("m", "count"), zip(stats.levels, stats.histogram))


def husimi_grid(state: np.ndarray, n_theta: int = 61, n_phi: int = 121):
    """Spin Husimi density Q(theta, phi) = (2J+1)/(4 pi) |<theta, phi|psi>|^2 on a grid."""
    N = len(state) - 1
    thetas = np.linspace(0, np.pi, n_theta)
    phis = np.linspace(0, 2 * np.pi, n_phi)
    rows = []
    for th in thetas:
        for ph in phis:
            amp = np.vdot(coherent_state(N, th, ph), state)
            rows.append((th, ph, (N + 1) / (4 * np.pi) * abs(amp) ** 2))
    return rows


PLOT_TEMPLATE = '''"""Render {name} panels from the CSVs in this directory (needs matplotlib)."""
import csv
import sys
from collections import defaultdict
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

here = Path(__file__).parent


def read(name):
    with open(here / name) as fh:
        rows = list(csv.DictReader(fh))
    return {{k: [float(r[k]) for r in rows] for k in rows[0]}} if rows else {{}}


traj = defaultdict(lambda: defaultdict(list))
with open(here / "trajectories.csv") as fh:
    for r in csv.DictReader(fh):
        for k, v in r.items():
            traj[r["traj_id"]][k].append(float(v))
ens = read("ensemble.csv")
hist = read("histogram.csv")
{extra}
fig, ax = plt.subplots(2, 2, figsize=(10, 7))
for tr in traj.values():
    ax[0, 0].plot(tr["t"], tr["jz_mean"], lw=0.5)
    ax[0, 1].plot(tr["t"], tr["jz_var"], lw=0.5)
ax[0, 0].set(xlabel="t", ylabel="<J_z>")
ax[0, 1].set(xlabel="t", ylabel="<dJ_z^2>", yscale="log")
ax[1, 0].plot(ens["t"], ens["e_jz2"], label="E[<J_z^2>]")
ax[1, 0].plot(ens["t"], ens["e_var"], label="E[<dJ_z^2>]")
ax[1, 0].set(xlabel="t")
ax[1, 0].legend()
ax[1, 1].bar(hist["m"], hist["count"])
ax[1, 1].set(xlabel="final level m", ylabel="count")
fig.tight_layout()
fig.savefig(here / "{name}.png", dpi=120)
{extra_plot}
if "--show" in sys.argv:
    plt.show()
'''

FIG1_EXTRA = '''pops = read("populations.csv")
photo = read("photocurrent.csv")
'''
FIG1_EXTRA_PLOT = '''fig2, ax2 = plt.subplots(1, 3, figsize=(14, 4))
for k in pops:
    if k != "t":
        ax2[0].plot(pops["t"], pops[k], label=k)
ax2[0].set(xlabel="t", ylabel="population")
ax2[0].legend(fontsize=6)
ax2[1].plot(photo["t"], photo["y_int"])
ax2[1].set(xlabel="t", ylabel="integrated photocurrent")
# approximate: Husimi density of the initial and final states, not a rendering of a sphere
q = read("bloch_density.csv")
final = [i for i, s in enumerate(q["which"]) if s == 1.0]
ax2[2].tricontourf([q["phi"][i] for i in final], [q["theta"][i] for i in final], [q["Q"][i] for i in final])
ax2[2].set(xlabel="phi", ylabel="theta", title="final-state Husimi density (approximate)")
fig2.tight_layout()
fig2.savefig(here / "fig1_single.png", dpi=120)
'''


def _fig1_outputs(tmp: Path, params: SimParams):
    rec = simulate_trajectory(params, ControllerSpec.from_params(params), noise=NoiseStream(params.seed, 0))
    m = spin_operators(params.N).m
    _write_csv(tmp / "populations.csv", ["t"] + [f"p_{_fmt(v)}" for v in m],
               ([t, *p] for t, p in zip(rec.t, rec.populations)))
    steps = np.arange(len(rec.photocurrent.increments) + 1)
    _write_csv(tmp / "photocurrent.csv", ("t", "y_dt", "y_int"),
               ((k * params.dt, rec.photocurrent.increments[k - 1] if k else 0.0, y)
                for k, y in zip(steps[::params.record_every], rec.photocurrent.integral[::params.record_every])))
    psi0 = coherent_state(params.N, params.theta)
    rows = [(0, *r) for r in husimi_grid(psi0)] + [(1, *r) for r in husimi_grid(rec.final_state)]
    _write_csv(tmp / "bloch_density.csv", ("which", "theta", "phi", "Q"), rows)


def execute(scenario: Scenario, n_workers: int = 1) -> tuple[Path, EnsembleStats]:
    """Run ``scenario`` and write its CSVs, manifest and plot script.

    Files are written to a scratch directory next to ``scenario.out`` and
    moved in only after everything succeeded, so a failed run leaves no
    partial outputs behind.
    """
    out = Path(scenario.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".partial-", dir=out.parent))
    try:
        params = scenario.params
        stats = run_ensemble(params, ControllerSpec.from_params(params), n_workers=n_workers,
                             chunk_size=scenario.chunk_size, n_keep=scenario.n_keep)
        if stats.partial:
            bad = [(f["start"], f["stop"]) for f in stats.failures]
            raise RuntimeError(f"trajectory chunks failed: {bad}")
        write_trajectories(tmp / "trajectories.csv", stats.t, stats.trace_indices, stats.traces)
        write_ensemble(tmp / "ensemble.csv", stats)
        write_histogram(tmp / "histogram.csv", stats)
        extra = extra_plot = ""
        if scenario.name == "fig1":
            _fig1_outputs(tmp, params)
            extra, extra_plot = FIG1_EXTRA, FIG1_EXTRA_PLOT
        plot_name = scenario.name if scenario.name != "custom" else "custom"
        (tmp / f"plot_{plot_name}.py").write_text(
            PLOT_TEMPLATE.format(name=plot_name, extra=extra, extra_plot=extra_plot))
        (tmp / "manifest.json").write_text(json.dumps(scenario.to_manifest(), indent=2, sort_keys=True) + "\n")
        out.mkdir(parents=True, exist_ok=True)
        for f in sorted(tmp.iterdir()):
            os.replace(f, out / f.name)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)
    return out, stats


# Verification --------------------------------------------------------------

@dataclass
class Verdict:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


def check_projection(stats: EnsembleStats, tv_limit=0.02, p0=0.246, p0_tol=0.015) -> list[Verdict]:
    prior = prior_level_distribution(stats.params)
    tv = total_variation(stats.histogram, prior)
    k0 = int(np.flatnonzero(stats.levels == 0)[0]) if np.any(stats.levels == 0) else None
    out = [Verdict("histogram vs prior", tv < tv_limit, f"TV = {tv:.4f} (limit {tv_limit})")]
    if k0 is not None:
        frac = stats.histogram[k0] / stats.histogram.sum()
        out.append(Verdict("fraction at m=0", abs(frac - p0) <= p0_tol, f"{frac:.4f} (target {p0} +/- {p0_tol})"))
    return out


def check_estimator_error(stats: EnsembleStats, times=(1.0, 2.0, 5.0), n_sigma=3.0) -> Verdict:
    p = stats.params
    parts, ok = [], True
    for tt in times:
        i = int(np.argmin(np.abs(stats.t - tt)))
        va = estimator_error_va(p.M, p.eta, stats.t[i])
        got, se = stats.mean["va"][i], stats.se["va"][i]
        ok &= bool(abs(got - va) <= n_sigma * se)
        parts.append(f"t={tt:g}: {got:.5f} +/- {se:.5f} vs {va:.5f}")
    return Verdict("estimator error 1/(4 M eta t)", ok, "; ".join(parts))


def check_law1(stats: EnsembleStats, lo=0.85, hi=0.95) -> list[Verdict]:
    """Convergence fraction in [lo, hi] and a nonzero plateau of E[<J_z^2>].

    The plateau is flat when E[<J_z^2>] changes by less than 10% over the
    last fifth of the run, and consistent with the unsuccessful fraction
    when it matches the mean squared final level within 10%.
    """
    frac = stats.convergence_fraction
    t, jz2, se = stats.t, stats.mean["jz2"], stats.se["jz2"]
    end = jz2[-1]
    i = int(np.argmin(np.abs(t - 0.8 * t[-1])))
    flat = abs(end - jz2[i]) <= 0.1 * end
    nonzero = end > 3 * se[-1] and end > 0
    lv = np.clip(np.round(stats.final_jz + stats.params.J), 0, stats.params.N) - stats.params.J
    expected = float(np.mean((lv - stats.params.m_d) ** 2))
    consistent = abs(end - expected) <= 0.1 * max(expected, 1e-12) + 3 * se[-1]
    return [
        Verdict("law 1 convergence fraction", lo <= frac <= hi, f"{frac:.4f} (target [{lo}, {hi}])"),
        Verdict("law 1 plateau", bool(flat and nonzero and consistent),
                f"E[Jz^2]({t[-1]:g}) = {end:.4f} +/- {se[-1]:.4f}, at t={t[i]:g}: {jz2[i]:.4f}, "
                f"mean squared final level {expected:.4f}"),
    ]


def check_law2(stats: EnsembleStats, min_frac=0.99, jz2_limit=0.05, t_from=3.0, n_sigma=3.0) -> list[Verdict]:
    """Convergence fraction, E[<J_z^2>](T) < jz2_limit and decrease over [t_from, T].

    Decrease means no step between recorded times rises by more than
    n_sigma pointwise standard errors, and the endpoint lies below the start.
    """
    frac = stats.convergence_fraction
    t, jz2, se = stats.t, stats.mean["jz2"], stats.se["jz2"]
    sel = t >= t_from - 1e-12
    if sel.sum() < 2:
        return [Verdict("law 2 convergence fraction", frac >= min_frac, f"{frac:.4f} (target >= {min_frac})"),
                Verdict("law 2 decreasing tail", False, f"run ends at t={t[-1]:g}, before {t_from:g}")]
    tail, tail_se = jz2[sel], se[sel]
    rises = np.diff(tail) > n_sigma * tail_se[1:]
    decreasing = not rises.any() and tail[-1] < tail[0]
    return [
        Verdict("law 2 convergence fraction", frac >= min_frac, f"{frac:.4f} (target >= {min_frac})"),
        Verdict("law 2 final E[Jz^2]", jz2[-1] < jz2_limit, f"{jz2[-1]:.5f} (limit {jz2_limit})"),
        Verdict("law 2 decreasing tail", bool(decreasing),
                f"E[Jz^2] {tail[0]:.5f} -> {tail[-1]:.5f} over t in [{t_from:g}, {t[-1]:g}], "
                f"{int(rises.sum())} rises beyond {n_sigma} SE"),
    ]


def check_open_loop(stats: EnsembleStats) -> list[Verdict]:
    mart = check_martingales(stats)
    avg = check_average_variance(stats)
    vb = variance_bounds_check(stats, t_max=5.0)
    out = [
        Verdict("martingales", mart.passed, "; ".join(mart.lines())),
        Verdict("average variance bound", avg.passed, "; ".join(avg.lines())),
        Verdict("variance bounds", vb.passed, "; ".join(vb.lines())),
    ]
    out += check_projection(stats)
    if stats.params.eta > 0:
        out.append(check_estimator_error(stats))
    return out


def check_single(scenario: Scenario) -> list[Verdict]:
    """Single-trajectory sanity: normalized populations and a white innovation."""
    params = scenario.params
    rec = simulate_trajectory(params, ControllerSpec.from_params(params), noise=NoiseStream(params.seed, 0))
    norm_err = float(np.max(np.abs(rec.populations.sum(axis=1) - 1)))
    out = [Verdict("populations normalized", norm_err < 1e-9, f"max |sum p - 1| = {norm_err:.2e}")]
    if rec.photocurrent is not None:
        w = rec.photocurrent.innovations / np.sqrt(params.dt)
        z = (np.mean(w**2) - 1) / np.sqrt(2 / len(w))
        out.append(Verdict("innovation is unit white noise", abs(z) < 5, f"mean dW^2/dt z-score {z:.2f}"))
    return out


def verify(scenario: Scenario, n_workers: int = 1, stream=None) -> bool:
    """Run the acceptance checks for a named scenario and print one line per check."""
    stream = stream or sys.stdout
    if scenario.name == "fig1":
        verdicts = check_single(scenario)
    else:
        stats = run_ensemble(scenario.params, ControllerSpec.from_params(scenario.params), n_workers=n_workers,
                             chunk_size=scenario.chunk_size, n_keep=0)
        kind = scenario.params.controller
        if kind == "none":
            verdicts = check_open_loop(stats)
        elif kind == "law1":
            verdicts = check_law1(stats)
        else:
            verdicts = check_law2(stats)
        if stats.partial:
            verdicts.append(Verdict("all trajectories completed", False, f"{len(stats.failures)} chunk(s) failed"))
    for v in verdicts:
        print(v.line(), file=stream)
    return all(v.passed for v in verdicts)


# Entry point ---------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qndspin", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="verb", required=True)
    sub.add_parser("list-scenarios", help="list named scenarios and their parameters")
    for verb in ("run", "verify"):
        p = sub.add_parser(verb, help=f"{verb} a scenario")
        if verb == "verify":
            p.add_argument("scenario_name", nargs="?", help="named scenario (fig1..fig4)")
        p.add_argument("--scenario", dest="scenario")
        p.add_argument("--config", help="flat key = value file")
        p.add_argument("--manifest", help="start from a manifest.json written by a previous run; flags still override")
        p.add_argument("--workers", type=int, default=1, help="worker processes (results do not depend on it)")
        p.add_argument("--out")
        p.add_argument("--chunk-size", dest="chunk_size")
        p.add_argument("--n-keep", dest="n_keep")
        for name in SimParams.field_names():
            flag = "--lambda" if name == "lam" else f"--{name.replace('_', '-')}"
            p.add_argument(flag, dest=name)
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _scenario_from_args(ns) -> Scenario:
    keys = set(SimParams.field_names()) | set(RUN_KEYS)
    values = {}
    if ns.manifest:
        try:
            base = Scenario.from_manifest(json.loads(Path(ns.manifest).read_text()))
        except (OSError, KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"cannot read manifest {ns.manifest}: {exc}") from None
        values = dict(asdict(base.params), scenario=base.name, out=base.out,
                      chunk_size=base.chunk_size, n_keep=base.n_keep)
    values.update({k: getattr(ns, k) for k in keys if getattr(ns, k, None) is not None})
    if getattr(ns, "scenario_name", None):
        values["scenario"] = ns.scenario_name
    return parse_config(values, ns.config)


def main(argv=None) -> int:
    parser = _build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(ns, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if ns.verb == "list-scenarios":
        for name, values in SCENARIOS.items():
            shown = ", ".join(f"{k}={values[k]:g}" if isinstance(values[k], float) else f"{k}={values[k]}"
                              for k in ("N", "M", "T", "dt", "n_traj", "controller", "lam"))
            print(f"{name:7s} {DESCRIPTIONS[name]}\n        {shown}")
        print(f"custom  {DESCRIPTIONS['custom']}; required keys: {', '.join(CUSTOM_REQUIRED)}")
        return EXIT_OK
    try:
        scenario = _scenario_from_args(ns)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    if ns.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    if ns.verb == "run":
        try:
            out, _ = execute(scenario, n_workers=ns.workers)
        except (OSError, RuntimeError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_INVALID
        print(f"wrote {out}")
        return EXIT_OK
    if scenario.name == "custom":
        print("error: verify needs a named scenario (fig1..fig4)", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK if verify(scenario, n_workers=ns.workers) else EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
