#!/usr/bin/env python3
"""Run spectral analysis, simulations and verification suites on a model file.

Structured results go to files (JSON reports, CSV tables with `#` header
lines, a JSON Lines events sidecar for spine runs); a short markdown summary
goes to stdout. Exit codes: 0 success, 1 failed tests or numerical failure,
2 usage or model errors.
"""

__author__ = "spinelab contributors"
__copyright__ = "Copyright (C) 2025 spinelab contributors"
__license__ = "MIT"

import argparse
import dataclasses as dc
import json
import logging as log
import math
import pathlib as pl
import sys
from collections.abc import Sequence
from typing import Any

import jsonlines  # https://jsonlines.readthedocs.io/
import numpy as np
import pandas as pd
import pendulum  # https://pendulum.eustace.io/docs/

from spinelab import __version__, config
from spinelab.cumulant import analytic_table, classify_regime
from spinelab.forward_sim import FlowMatrix, ensemble
from spinelab.model import ModelSpec, load_spec, spec_hash
from spinelab.spectral import analyze, assumption4_grid, assumption4_scan, spectral_gap
from spinelab.spine_sim import gamma_ensemble
from spinelab.verify import kesten_stigum_experiment, run_suite, weak_extinction_test

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def parse_floats(text: str) -> list[float]:
    """Parse a comma separated list of numbers.

    >>> parse_floats("0.5, 1,2")
    [0.5, 1.0, 2.0]
    """
    try:
        return [float(item) for item in text.split(",") if item.strip()]
    except ValueError as err:
        raise ValueError(f"cannot parse {text!r} as comma separated numbers") from err


def jsonable(obj: Any) -> Any:
    """Convert numpy values to plain Python and non-finite floats to strings.

    >>> jsonable({"x": np.float64("inf"), "y": [np.int64(2), math.nan]})
    {'x': 'inf', 'y': [2, 'nan']}
    """
    if isinstance(obj, dict):
        return {str(key): jsonable(value) for key, value in obj.items()}
    if isinstance(obj, list | tuple):
        return [jsonable(value) for value in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, np.bool_ | bool):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, float | np.floating):
        value = float(obj)
        if math.isfinite(value):
            return value
        return "nan" if math.isnan(value) else ("inf" if value > 0 else "-inf")
    return obj


@dc.dataclass(frozen=True)
class RunConfig:
    command: str
    spec_path: pl.Path
    mu: tuple[float, ...] | None
    horizon: float | None
    eval_times: tuple[float, ...]
    n_paths: int
    seed: int
    out: pl.Path | None
    threads: int
    thresholds: config.Thresholds
    mode: str = "all"
    ladder: tuple[float, ...] | None = None
    epsilon: float = 0.01
    f0: tuple[float, ...] | None = None
    progress: bool = False

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> "RunConfig":
        if args.paths < 1:
            raise ValueError(f"--paths must be positive, got {args.paths}")
        if args.seed < 0:
            raise ValueError(f"--seed must be non-negative, got {args.seed}")
        return cls(
            command=args.command,
            spec_path=pl.Path(args.spec),
            mu=tuple(parse_floats(args.mu)) if args.mu else None,
            horizon=args.horizon,
            eval_times=tuple(parse_floats(args.eval)),
            n_paths=args.paths,
            seed=args.seed,
            out=pl.Path(args.out) if args.out else None,
            threads=config.resolve_threads(args.threads),
            thresholds=config.resolve_thresholds(args.threshold),
            mode=getattr(args, "mode", "all"),
            ladder=tuple(parse_floats(args.ladder)) if getattr(args, "ladder", None) else None,
            epsilon=getattr(args, "epsilon", 0.01),
            f0=tuple(parse_floats(args.f0)) if getattr(args, "f0", None) else None,
            progress=sys.stderr.isatty(),
        )

    def initial_measure(self, spec: ModelSpec) -> np.ndarray:
        if self.mu is None:
            return np.eye(spec.K)[0]
        mu = np.array(self.mu, dtype=np.float64)
        if mu.shape != (spec.K,) or np.any(mu < 0):
            raise ValueError(f"--mu needs {spec.K} non-negative numbers, got {list(self.mu)}")
        return mu

    def times(self) -> tuple[float, list[float]]:
        """Horizon and sorted evaluation times inside it."""
        times = sorted(set(self.eval_times))
        horizon = self.horizon if self.horizon is not None else max(times, default=1.0)
        if not horizon > 0:
            raise ValueError(f"--horizon must be positive, got {horizon}")
        if any(t < 0 or t > horizon for t in times):
            raise ValueError(f"evaluation times {times} must lie in [0, {horizon}]")
        return horizon, times or [horizon]

    def output(self, suffix: str) -> pl.Path:
        if self.out is not None:
            return self.out
        return pl.Path(f"{self.spec_path.stem}_{self.command}{suffix}")


def artifact_header(cfg: RunConfig, spec: ModelSpec) -> dict[str, Any]:
    return {
        "tool": "spinelab",
        "version": __version__,
        "command": cfg.command,
        "spec": cfg.spec_path.name,
        "spec_hash": spec_hash(spec),
        "seed": cfg.seed,
        "paths": cfg.n_paths,
        "thresholds": cfg.thresholds.to_dict(),
    }


def write_json(path: pl.Path, header: dict[str, Any], result: Any) -> None:
    text = json.dumps(jsonable({"header": header, "result": result}), indent=2, sort_keys=False)
    path.write_text(text + "\n", encoding="utf-8")
    log.info(f"wrote {path}")


def write_csv(path: pl.Path, header: dict[str, Any], frame: pd.DataFrame) -> None:
    with path.open("w", encoding="utf-8", newline="") as fh:
        for key, value in header.items():
            fh.write(f"# {key}: {json.dumps(jsonable(value))}\n")
        frame.to_csv(fh, index=False, float_format="%.17g", lineterminator="\n")
    log.info(f"wrote {path} ({len(frame)} rows)")


def print_summary(title: str, frame: pd.DataFrame, started: pendulum.DateTime) -> None:
    elapsed = (pendulum.now() - started).total_seconds()
    print(f"\n{title}\n")
    print(frame.to_markdown(index=False))
    print(f"\nelapsed {elapsed:.2f} s")


def cmd_spectral(cfg: RunConfig, spec: ModelSpec, started) -> int:
    spectral = analyze(spec)
    scan = assumption4_scan(spectral, assumption4_grid(spectral), cfg.thresholds.assumption4_tol)
    result = spectral.to_dict() | {
        "spectral_gap": spectral_gap(spectral),
        "assumption4": scan.rows(),
        "assumption4_passed": scan.passed,
        "assumption4_settle_time": scan.settle_time,
    }
    write_json(cfg.output(".json"), artifact_header(cfg, spec), result)
    table = pd.DataFrame({"type": range(1, spec.K + 1), "u": spectral.u, "v": spectral.v, "h": spectral.h, "q": spectral.q})
    print_summary(f"Lambda = {spectral.Lambda:.10g}, lambda1 = {spectral.lambda1:.10g}", table, started)
    return EXIT_OK


def cmd_forward(cfg: RunConfig, spec: ModelSpec, started) -> int:
    mu = cfg.initial_measure(spec)
    horizon, times = cfg.times()
    fm = FlowMatrix.from_spec(spec, cfg.thresholds.window)
    bundle = ensemble(spec, mu, horizon, times, cfg.n_paths, cfg.seed, fm, cfg.threads, cfg.thresholds.event_cap, progress=cfg.progress)
    write_csv(cfg.output(".csv"), artifact_header(cfg, spec) | {"mu": mu}, bundle.to_frame())
    spectral = analyze(spec)
    rows = []
    for t in times:
        target = spectral.M(t).T @ mu
        rows += [{"t": t, "type": j + 1, "mean": bundle.mean_vector(t)[j], "target": target[j]} for j in range(spec.K)]
    print_summary(f"{cfg.n_paths} forward paths", pd.DataFrame(rows), started)
    return EXIT_OK


def cmd_spine(cfg: RunConfig, spec: ModelSpec, started) -> int:
    mu = cfg.initial_measure(spec)
    horizon, times = cfg.times()
    spectral = analyze(spec)
    fm = FlowMatrix.from_spec(spec, cfg.thresholds.window)
    bundle = gamma_ensemble(
        spec, spectral, mu, horizon, times, cfg.n_paths, cfg.seed, fm, cfg.threads,
        cfg.thresholds.event_cap, keep_realizations=True, progress=cfg.progress,
    )
    out = cfg.output(".csv")
    header = artifact_header(cfg, spec) | {"mu": mu}
    write_csv(out, header, bundle.to_frame())
    sidecar = out.with_suffix(".events.jsonl")
    with jsonlines.open(sidecar, mode="w") as writer:
        writer.write(jsonable({"header": header}))
        writer.write_all(jsonable(bundle.event_records()))
    log.info(f"wrote {sidecar}")
    counts = [len(r.events) for r in bundle.realizations]
    table = pd.DataFrame({"t": times, "mean <1, Gamma_t>": bundle.pairing(np.ones(spec.K)).mean(axis=0)})
    print_summary(f"{cfg.n_paths} spine realizations, {np.mean(counts):.3g} immigrants each", table, started)
    return EXIT_OK


def cmd_verify(cfg: RunConfig, spec: ModelSpec, started) -> int:
    mu = cfg.initial_measure(spec)
    _horizon, times = cfg.times()
    if cfg.mode == "analytic":
        spectral = analyze(spec)
        f0 = np.ones(spec.K) if cfg.f0 is None else np.array(cfg.f0, dtype=np.float64)
        frame = analytic_table(spec, spectral, mu, f0, [0.0, *times])
        write_csv(cfg.output(".csv"), artifact_header(cfg, spec) | {"mu": mu, "f0": f0}, frame)
        print_summary("analytic targets", frame, started)
        return EXIT_OK
    report = run_suite(spec, mu, times, cfg.n_paths, cfg.seed, cfg.thresholds, cfg.threads, cfg.progress)
    frame = report.to_frame()
    write_json(cfg.output(".json"), artifact_header(cfg, spec) | {"mu": mu}, {
        "passed": report.passed, "tests": frame.to_dict(orient="records"),
    })
    shown = frame[~frame["pass"]] if not report.passed else frame.tail(10)
    print_summary(f"suite {'PASSED' if report.passed else 'FAILED'}: {len(frame)} checks", shown, started)
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_kslimit(cfg: RunConfig, spec: ModelSpec, started) -> int:
    mu = cfg.initial_measure(spec)
    spectral = analyze(spec)
    if cfg.ladder:
        ladder = sorted(cfg.ladder)
    else:
        top = 10.0 / abs(spectral.lambda1) if spectral.lambda1 != 0 else 10.0
        ladder = [top / 8, top / 4, top / 2, top]
    fm = FlowMatrix.from_spec(spec, cfg.thresholds.window)
    bundle = ensemble(spec, mu, ladder[-1], ladder, cfg.n_paths, cfg.seed, fm, cfg.threads, cfg.thresholds.event_cap, progress=cfg.progress)
    report = kesten_stigum_experiment(spec, spectral, mu, ladder, cfg.n_paths, cfg.seed, cfg.thresholds, bundle=bundle)
    extinction = weak_extinction_test(bundle, cfg.epsilon, spectral.lambda1, cfg.thresholds)
    write_json(cfg.output(".json"), artifact_header(cfg, spec) | {"mu": mu}, {
        **report.to_dict(), "weak_extinction": extinction.to_dict(),
    })
    title = (
        f"verdict {report.verdict} / regime {report.classification.regime}"
        f" ({'consistent' if report.consistent else 'DISAGREE'});"
        f" weak extinction {'skipped' if extinction.skipped else ('passed' if extinction.passed else 'FAILED')}"
    )
    print_summary(title, report.ladder, started)
    return EXIT_OK if report.consistent and extinction.passed else EXIT_FAIL


def cmd_classify(cfg: RunConfig, spec: ModelSpec, started) -> int:
    spectral = analyze(spec)
    classification = classify_regime(spec, spectral)
    write_json(cfg.output(".json"), artifact_header(cfg, spec), classification.to_dict())
    table = pd.DataFrame({"reason": classification.reasons})
    print_summary(f"regime {classification.regime}", table, started)
    return EXIT_OK


HANDLERS = {
    "spectral": cmd_spectral,
    "forward": cmd_forward,
    "spine": cmd_spine,
    "verify": cmd_verify,
    "kslimit": cmd_kslimit,
    "classify": cmd_classify,
}


def run(cfg: RunConfig) -> int:
    """Load the model and dispatch; returns the process exit code."""
    started = pendulum.now()
    try:
        spec = load_spec(cfg.spec_path)
        return HANDLERS[cfg.command](cfg, spec, started)
    except (OSError, ValueError) as err:
        print(f"spinelab {cfg.command}: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except RuntimeError as err:
        print(f"spinelab {cfg.command}: failed: {err}", file=sys.stderr)
        return EXIT_FAIL


def process_args(argv: Sequence[str]) -> argparse.Namespace:
    """Process arguments."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-s", "--spec", required=True, help="JSON model file")
    common.add_argument(
        "-m",
        "--mu",
        type=str,
        default=None,
        help="initial masses, comma separated (default: unit mass on type 1)",
    )
    common.add_argument("-T", "--horizon", type=float, default=None, help="horizon (default: last eval time)")
    common.add_argument(
        "-e",
        "--eval",
        type=str,
        default="0.5,1,2",
        help="evaluation times, comma separated (default: %(default)s)",
    )
    common.add_argument("-n", "--paths", type=int, default=10_000, help="paths (default: %(default)s)")
    common.add_argument("--seed", type=int, default=0, help="master seed (default: %(default)s)")
    common.add_argument("-o", "--out", type=str, default=None, help="output file")
    common.add_argument(
        "-t",
        "--threads",
        type=int,
        default=None,
        help="worker threads (default: SPINELAB_THREADS or the CPU count)",
    )
    common.add_argument(
        "--threshold",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a pass/fail threshold, repeatable",
    )
    common.add_argument(
        "-L",
        "--log-to-file",
        action="store_true",
        default=False,
        help="log to file %(prog)s.log",
    )
    common.add_argument(
        "-V",
        "--verbose",
        action="count",
        default=0,
        help="increase verbosity from critical though error, warning, info, and debug",
    )

    arg_parser = argparse.ArgumentParser(prog="spinelab", description="Spine decomposition laboratory.")
    arg_parser.add_argument("--version", action="version", version=__version__)
    subparsers = arg_parser.add_subparsers(dest="command", required=True)
    subparsers.add_parser("spectral", parents=[common], help="Perron data, spine generator, mixing scan")
    subparsers.add_parser("forward", parents=[common], help="forward Monte Carlo paths to CSV")
    subparsers.add_parser("spine", parents=[common], help="spine-decomposition realizations to CSV")
    verify = subparsers.add_parser("verify", parents=[common], help="run the verification suite")
    verify.add_argument(
        "--mode",
        choices=("all", "analytic"),
        default="all",
        help="full suite or analytic table only (default: %(default)s)",
    )
    verify.add_argument("--f0", type=str, default=None, help="test function for --mode analytic (default: ones)")
    kslimit = subparsers.add_parser("kslimit", parents=[common], help="Kesten-Stigum experiment")
    kslimit.add_argument("--ladder", type=str, default=None, help="horizon ladder (default: up to 10/|lambda1|)")
    kslimit.add_argument(
        "--epsilon",
        type=float,
        default=0.01,
        help="mass threshold for the weak extinction test (default: %(default)s)",
    )
    subparsers.add_parser("classify", parents=[common], help="analytic regime classification")
    args = arg_parser.parse_args(argv)

    log_level = (log.CRITICAL) - (args.verbose * 10)
    LOG_FORMAT = "%(levelname).4s %(funcName).10s:%(lineno)-4d| %(message)s"
    if args.log_to_file:
        print("logging to file")
        log.basicConfig(
            filename=f"{pl.PurePath(__file__).name!s}.log",
            filemode="w",
            level=log_level,
            format=LOG_FORMAT,
        )
    else:
        log.basicConfig(level=log_level, format=LOG_FORMAT)

    return args


def main(argv: Sequence[str] | None = None) -> int:
    """Set up arguments and call functions."""
    args = process_args(sys.argv[1:] if argv is None else argv)
    try:
        cfg = RunConfig.from_args(args)
    except ValueError as err:
        print(f"spinelab {args.command}: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
