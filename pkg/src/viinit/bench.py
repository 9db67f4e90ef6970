"""
Experiment sweeps over simulated windows, written as CSV tables.

Every row is reproducible from ``(seed, window, realization)``: the clean
windows come from :func:`viinit.simulator.simulate` with the config seed and
each realization draws its noise from a generator seeded with
``[seed, nf, window, realization, sigma index]``.
"""

from __future__ import annotations

import csv
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import o2o, p2o
from .core import DataAlignmentError, IllConditioned, InsufficientParallax, OutOfRange
from .metrics import converged, metric_gravity, metric_points, metric_speed, metric_velocity
from .p2o import preintegrate_tracks
from .refiner import DivergedError, RefinerOptions, refine
from .simulator import EmptySelection, SimulationSpec, SimWindow, simulate
from .state import InitState, SolverOptions

EXPERIMENTS = ("noise_sweep", "integration_sweep", "convergence_frequency", "timing", "single")
SOLVERS = {"p2o": p2o, "o2o": o2o}
SOLVER_ERRORS = (IllConditioned, InsufficientParallax, DataAlignmentError, OutOfRange, DivergedError, np.linalg.LinAlgError)

ROW_COLUMNS = (
    "experiment",
    "sigma",
    "nf",
    "window",
    "realization",
    "solver",
    "iteration",
    "integration_time",
    "vel_err",
    "speed_err",
    "grav_err_deg",
    "point_err",
    "wall_time",
    "converged",
    "error",
)
SUMMARY_COLUMNS = (
    "experiment",
    "sigma",
    "nf",
    "solver",
    "iteration",
    "count",
    "failures",
    "integration_time",
    "vel_err",
    "speed_err",
    "grav_err_deg",
    "point_err",
    "wall_time_median",
    "converged_pct",
)


class ConfigError(ValueError):
    """Invalid benchmark configuration."""


@dataclass(frozen=True)
class BenchConfig:
    """
    Benchmark configuration; mirrors the JSON config file.

    ``simulation`` holds a :class:`SimulationSpec` dictionary; its
    ``downsample`` and ``noise.pixel_sigma`` are overridden by the sweep.
    """

    experiment: str = "single"
    sigma_list: tuple[float, ...] = (0.3,)
    nf_list: tuple[int, ...] = (3,)
    realizations: int = 1
    solvers: tuple[str, ...] = ("p2o", "o2o")
    refine: bool = False
    refiner: dict = field(default_factory=dict)
    solver_options: dict = field(default_factory=dict)
    iterations_list: tuple[int, ...] = (5, 10, 15)
    vel_tol: float = 0.025
    grav_tol: float = 0.25
    timing_repeats: int = 20
    simulation: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        if self.realizations < 1:
            raise ConfigError("realizations must be >= 1")
        if not (self.vel_tol > 0 and self.grav_tol > 0):
            raise ConfigError("thresholds must be positive")
        if not self.solvers or any(s not in SOLVERS for s in self.solvers):
            raise ConfigError(f"solvers must be a nonempty subset of {sorted(SOLVERS)}")
        if not self.sigma_list or min(self.sigma_list) < 0:
            raise ConfigError("sigma_list must be nonempty and nonnegative")
        if not self.nf_list or min(self.nf_list) < 1:
            raise ConfigError("nf_list must be nonempty and positive")
        if self.timing_repeats < 1 or not self.iterations_list or min(self.iterations_list) < 1:
            raise ConfigError("timing_repeats and iterations_list entries must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "BenchConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        d = dict(d)
        for key in ("sigma_list", "nf_list", "solvers", "iterations_list"):
            if key in d:
                d[key] = tuple(d[key])
        try:
            cfg = cls(**d)
            cfg.sim_spec(cfg.nf_list[0], cfg.sigma_list[0])
            cfg.solver_opts()
            cfg.refiner_opts()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return cfg

    def sim_spec(self, nf: int, sigma: float) -> SimulationSpec:
        base = SimulationSpec.from_dict(self.simulation)
        return replace(base, downsample=nf, noise=replace(base.noise, pixel_sigma=sigma, seed=self.seed))

    def solver_opts(self) -> SolverOptions:
        return SolverOptions(**self.solver_options)

    def refiner_opts(self, **override) -> RefinerOptions:
        return replace(RefinerOptions(**self.refiner), **override)


def _metrics(state: InitState, win: SimWindow) -> dict:
    truth = win.truth
    pts, _ = metric_points(state.points, truth.points, truth.ref_R_C, truth.ref_p_C)
    return {
        "vel_err": metric_velocity(state.v0, truth.v0),
        "speed_err": metric_speed(state.v0, truth.v0),
        "grav_err_deg": metric_gravity(state.g0, truth.g0),
        "point_err": pts,
    }


def _row(cfg, sigma, nf, wi, ri, solver, iteration, win, **values) -> dict:
    row = dict.fromkeys(ROW_COLUMNS, float("nan"))
    row.update(
        experiment=cfg.experiment,
        sigma=sigma,
        nf=nf,
        window=wi,
        realization=ri,
        solver=solver,
        iteration=iteration,
        integration_time=win.integration_time,
        converged=False,
        error="",
    )
    row.update(values)
    return row


def _windows(cfg: BenchConfig, nf: int) -> list[SimWindow]:
    return simulate(cfg.sim_spec(nf, 0.0), cfg.seed)


def _realize(cfg: BenchConfig, win: SimWindow, nf: int, wi: int, ri: int, si: int, sigma: float) -> SimWindow:
    noise = replace(cfg.sim_spec(nf, sigma).noise)
    rng = np.random.default_rng([cfg.seed, nf, wi, ri, si])
    return win.realize(noise, rng)


def _solve_rows(cfg, sigma, si, nf, windows, rows, progress):
    opts = cfg.solver_opts()
    for wi, clean in enumerate(windows):
        for ri in range(cfg.realizations):
            win = _realize(cfg, clean, nf, wi, ri, si, sigma)
            for name in cfg.solvers:
                t0 = time.perf_counter()
                try:
                    state = SOLVERS[name].solve(win.tracks, win.imu, win.calib, opts)
                except SOLVER_ERRORS as exc:
                    rows.append(_row(cfg, sigma, nf, wi, ri, name, 0, win, error=type(exc).__name__))
                    continue
                wall = time.perf_counter() - t0
                m = _metrics(state, win)
                rows.append(
                    _row(
                        cfg, sigma, nf, wi, ri, name, 0, win, wall_time=wall,
                        converged=converged(m["vel_err"], m["grav_err_deg"], cfg.vel_tol, cfg.grav_tol), **m,
                    )
                )
                if cfg.refine:
                    _refine_rows(cfg, sigma, nf, wi, ri, name, win, state, rows, None)
            progress(f"sigma={sigma} nf={nf} window={wi} realization={ri}")


def _refine_rows(cfg, sigma, nf, wi, ri, name, win, state, rows, checkpoints):
    """Refine and emit rows, either the final state or the states at given iteration counts."""
    max_it = max(checkpoints) if checkpoints else None
    ropts = cfg.refiner_opts(**({"max_iterations": max_it} if max_it else {}))
    label = f"{name}+lm"
    t0 = time.perf_counter()
    try:
        res = refine(state, win.tracks, win.imu, win.calib, ropts, truth=win.truth)
    except (SOLVER_ERRORS + (ValueError,)) as exc:
        for k in checkpoints or [0]:
            rows.append(_row(cfg, sigma, nf, wi, ri, label, k, win, error=type(exc).__name__))
        return
    wall = time.perf_counter() - t0
    if not checkpoints:
        m = _metrics(res.state, win)
        rows.append(
            _row(
                cfg, sigma, nf, wi, ri, label, res.iterations, win, wall_time=wall,
                converged=converged(m["vel_err"], m["grav_err_deg"], cfg.vel_tol, cfg.grav_tol), **m,
            )
        )
        return
    # the trace holds the state after every accepted step; later checkpoints reuse the last one
    for k in checkpoints:
        entry = res.trace[min(k, len(res.trace) - 1)]
        hit = any(
            converged(e["vel_err"], e["grav_err_deg"], cfg.vel_tol, cfg.grav_tol) for e in res.trace[: k + 1]
        )
        rows.append(
            _row(
                cfg, sigma, nf, wi, ri, label, k, win, wall_time=wall, converged=hit,
                vel_err=entry["vel_err"], grav_err_deg=entry["grav_err_deg"],
                speed_err=metric_speed(entry["v0"], win.truth.v0),
            )
        )


def _convergence_rows(cfg, sigma, si, nf, windows, rows, progress):
    opts = cfg.solver_opts()
    for wi, clean in enumerate(windows):
        for ri in range(cfg.realizations):
            win = _realize(cfg, clean, nf, wi, ri, si, sigma)
            for name in cfg.solvers:
                try:
                    state = SOLVERS[name].solve(win.tracks, win.imu, win.calib, opts)
                except SOLVER_ERRORS as exc:
                    for k in cfg.iterations_list:
                        rows.append(_row(cfg, sigma, nf, wi, ri, f"{name}+lm", k, win, error=type(exc).__name__))
                    continue
                _refine_rows(cfg, sigma, nf, wi, ri, name, win, state, rows, sorted(cfg.iterations_list))
            progress(f"nf={nf} window={wi} realization={ri}")


def time_solver(module, tracks, preints, calib, options: SolverOptions, repeats: int = 20) -> float:
    """Median wall time of build + solve (preintegration excluded) after one warm-up run."""
    module.solve_preintegrated(tracks, preints, calib, options)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        module.solve_preintegrated(tracks, preints, calib, options)
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def _timing_rows(cfg, sigma, si, nf, windows, rows, progress):
    opts = cfg.solver_opts()
    for wi, clean in enumerate(windows):
        win = _realize(cfg, clean, nf, wi, 0, si, sigma)
        preints = preintegrate_tracks(win.tracks, win.imu)
        for name in cfg.solvers:
            try:
                wall = time_solver(SOLVERS[name], win.tracks, preints, win.calib, opts, cfg.timing_repeats)
            except SOLVER_ERRORS as exc:
                rows.append(_row(cfg, sigma, nf, wi, 0, name, 0, win, error=type(exc).__name__))
                continue
            rows.append(_row(cfg, sigma, nf, wi, 0, name, 0, win, wall_time=wall))
        progress(f"timing window={wi}")


def run_rows(cfg: BenchConfig, progress: Callable[[str], None] = lambda s: None) -> list[dict]:
    """Execute the configured experiment and return the row-level records."""
    rows: list[dict] = []
    if cfg.experiment == "noise_sweep":
        coords = [(s, si, cfg.nf_list[0]) for si, s in enumerate(cfg.sigma_list)]
    elif cfg.experiment in ("integration_sweep", "convergence_frequency"):
        coords = [(cfg.sigma_list[0], 0, nf) for nf in cfg.nf_list]
    else:
        coords = [(cfg.sigma_list[0], 0, cfg.nf_list[0])]
    runner = {
        "convergence_frequency": _convergence_rows,
        "timing": _timing_rows,
    }.get(cfg.experiment, _solve_rows)
    cache: dict[int, list[SimWindow]] = {}
    for sigma, si, nf in coords:
        if nf not in cache:
            try:
                cache[nf] = _windows(cfg, nf)
            except EmptySelection:
                cache[nf] = []
        runner(cfg, sigma, si, nf, cache[nf], rows, progress)
    return rows


def summarize(rows: list[dict]) -> list[dict]:
    """Means per sweep coordinate, solver and iteration (failed rows counted, not averaged)."""
    groups: dict[tuple, list[dict]] = defaultdict(list)
    for r in rows:
        groups[(r["experiment"], r["sigma"], r["nf"], r["solver"], r["iteration"])].append(r)
    out = []
    for key in sorted(groups, key=lambda k: (k[0], k[1], k[2], k[3], k[4])):
        grp = groups[key]
        ok = [r for r in grp if not r["error"]]

        def mean(col):
            vals = np.array([r[col] for r in ok], dtype=float)
            vals = vals[np.isfinite(vals)]
            return float(vals.mean()) if len(vals) else float("nan")

        walls = np.array([r["wall_time"] for r in ok], dtype=float)
        walls = walls[np.isfinite(walls)]
        out.append(
            dict(
                zip(SUMMARY_COLUMNS[:5], key),
                count=len(grp),
                failures=len(grp) - len(ok),
                integration_time=mean("integration_time"),
                vel_err=mean("vel_err"),
                speed_err=mean("speed_err"),
                grav_err_deg=mean("grav_err_deg"),
                point_err=mean("point_err"),
                wall_time_median=float(np.median(walls)) if len(walls) else float("nan"),
                converged_pct=100.0 * sum(bool(r["converged"]) for r in grp) / len(grp),
            )
        )
    return out


def write_csv(rows: list[dict], columns: tuple[str, ...], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for r in rows:
            writer.writerow([_fmt(r[c]) for c in columns])


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return "nan" if np.isnan(v) else repr(float(v))
    return v


def run_experiment(
    cfg: BenchConfig, out_dir: str | Path, progress: Callable[[str], None] = lambda s: None
) -> tuple[Path, Path]:
    """Run ``cfg`` and write ``rows.csv`` and ``summary.csv`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = run_rows(cfg, progress)
    rows_path, summary_path = out / "rows.csv", out / "summary.csv"
    write_csv(rows, ROW_COLUMNS, rows_path)
    write_csv(summarize(rows), SUMMARY_COLUMNS, summary_path)
    return rows_path, summary_path


def config_to_dict(cfg: BenchConfig) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()}
