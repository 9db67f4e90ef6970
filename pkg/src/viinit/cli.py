"""
``vi-init`` command line.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 data error
(missing or malformed files, or a solver failure on the given data).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import o2o, p2o
from .bench import SOLVER_ERRORS, BenchConfig, ConfigError, config_to_dict, run_experiment
from .io import DataError, load_window, save_trace, save_window
from .metrics import metric_gravity, metric_velocity
from .refiner import RefinerOptions, refine
from .simulator import EmptySelection, SimulationSpec, simulate
from .state import InitState, SolverOptions

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _load_json(path: str) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def cmd_simulate(args) -> int:
    d = _load_json(args.spec)
    try:
        spec = SimulationSpec.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    try:
        windows = simulate(spec, args.seed)
    except EmptySelection as exc:
        raise DataError(str(exc)) from exc
    out = Path(args.out)
    for i, w in enumerate(windows):
        save_window(w, out / f"window_{i:03d}")
        print(f"window_{i:03d}: {len(w.tracks)} tracks, integration time {w.integration_time:.3f} s")
    return EXIT_OK


def cmd_solve(args) -> int:
    tracks, imu, calib, truth = load_window(args.data)
    opts = SolverOptions(estimate_accel_bias=args.bias, enforce_gravity_norm=args.gravity_norm)
    module = p2o if args.solver == "p2o" else o2o
    try:
        state = module.solve(tracks, imu, calib, opts)
    except SOLVER_ERRORS as exc:
        raise DataError(f"{type(exc).__name__}: {exc}") from exc
    state.save(args.out)
    _report(state, truth)
    return EXIT_OK


def cmd_refine(args) -> int:
    tracks, imu, calib, truth = load_window(args.data)
    try:
        initial = InitState.load(args.init)
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read initial state: {exc}") from exc
    try:
        opts = RefinerOptions(
            loss="cauchy" if args.cauchy is not None else "squared",
            cauchy_scale=args.cauchy if args.cauchy is not None else 1.0,
            estimate_gyro_bias=args.gyro_bias,
            estimate_accel_bias=args.bias,
            max_iterations=args.max_iters,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    try:
        result = refine(initial, tracks, imu, calib, opts, truth=truth)
    except SOLVER_ERRORS + (ValueError,) as exc:
        raise DataError(f"{type(exc).__name__}: {exc}") from exc
    out = Path(args.out) if args.out else Path(args.init).with_name("refined.json")
    result.state.save(out)
    save_trace(result.trace, args.trace or out.with_suffix(".trace.csv"))
    print(f"{result.iterations} iterations, stop: {result.reason}, cost {result.trace[-1]['cost']:.6g}")
    _report(result.state, truth)
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = BenchConfig.from_dict(_load_json(args.config))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w") as f:
        json.dump(config_to_dict(cfg), f, indent=2)
    progress = (lambda s: print(s, file=sys.stderr)) if args.verbose else (lambda s: None)
    rows, summary = run_experiment(cfg, out, progress)
    print(f"wrote {rows} and {summary}")
    return EXIT_OK


def _report(state: InitState, truth) -> None:
    print(f"v0 = {state.v0.round(6).tolist()}  g0 = {state.g0.round(6).tolist()}")
    if truth is not None:
        print(
            f"velocity error {metric_velocity(state.v0, truth.v0):.4g} (relative), "
            f"gravity error {metric_gravity(state.g0, truth.g0):.4g} deg"
        )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vi-init", description="Closed-form visual-inertial initialization.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate simulated windows")
    p.add_argument("--spec", required=True, help="simulation spec JSON")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("solve", help="closed-form initialization of one window")
    p.add_argument("--data", required=True, help="window directory")
    p.add_argument("--solver", choices=("p2o", "o2o"), default="p2o")
    p.add_argument("--bias", action="store_true", help="estimate the accelerometer bias")
    p.add_argument("--gravity-norm", action="store_true", help="enforce |g0| = 9.81")
    p.add_argument("--out", required=True, help="solution JSON")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("refine", help="Levenberg-Marquardt refinement of a solution")
    p.add_argument("--data", required=True)
    p.add_argument("--init", required=True, help="solution JSON to start from")
    p.add_argument("--cauchy", type=float, default=None, metavar="SCALE", help="Cauchy loss scale in pixels")
    p.add_argument("--gyro-bias", action="store_true")
    p.add_argument("--bias", action="store_true", help="refine the accelerometer bias")
    p.add_argument("--max-iters", type=int, default=50)
    p.add_argument("--out", default=None, help="refined solution JSON")
    p.add_argument("--trace", default=None, help="trace CSV")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("bench", help="run an experiment sweep")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"vi-init: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"vi-init: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
