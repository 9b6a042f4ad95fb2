"""Command-line front end: ``stein-sampler {sweep,train,ksd,plot,search}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, density, harness
from .errors import ConfigError, DivergenceError, DomainError, ParseError, SteinSamplerError
from .plot import ksd_vs_n_svg
from .samplers import MPMCTrainConfig, stein_mpmc
from .stein_kernel import KernelConfig, ksd_and_bandwidth

log = logging.getLogger("stein_sampler")

EXIT_FAILED_CELLS = 1
EXIT_USAGE = 2
LOG_ENV = "STEIN_SAMPLER_LOG"


class UsageError(Exception):
    """Bad input from the command line; reported with exit code 2."""


def _configure_logging(verbose: bool) -> None:
    level = logging.DEBUG if verbose else getattr(logging, os.environ.get(LOG_ENV, "WARNING").upper(), logging.WARNING)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    handler.setLevel(level)
    log.handlers[:] = [handler]
    # handlers filter; the sweep log file always receives INFO
    log.setLevel(logging.DEBUG)
    log.propagate = False


def parse_target(text: str):
    """Preset name, inline JSON object, or path to a JSON file."""
    if text in density.PRESETS:
        return text
    if text.lstrip().startswith("{"):
        try:
            spec = json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"--target: invalid JSON: {exc.msg}") from None
    else:
        path = Path(text)
        if not path.exists():
            raise UsageError(f"--target: {text!r} is neither a preset ({', '.join(sorted(density.PRESETS))}) nor an existing file")
        try:
            spec = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    density.from_spec(spec)
    return spec


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _bandwidth(text: str) -> KernelConfig:
    if text == "median":
        return KernelConfig()
    try:
        return KernelConfig.fixed(float(text))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bandwidth must be 'median' or a positive number, got {text!r}") from None


def _require_file(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"file not found: {p}")
    return p


# --- subcommands ------------------------------------------------------------


def cmd_sweep(args) -> int:
    if args.config:
        cfg = harness.SweepConfig.load(_require_file(args.config)).to_dict()
    else:
        cfg = harness.SweepConfig().to_dict()
    if args.target:
        cfg["target"] = parse_target(args.target)
    if args.methods:
        cfg["methods"] = args.methods.split(",")
    if args.n:
        cfg["n_values"] = args.n
    if args.seeds is not None:
        cfg["seeds"] = args.seeds
    if args.seed is not None:
        cfg["master_seed"] = args.seed
    out = Path(args.out or cfg["output_dir"])
    cfg["output_dir"] = str(out)
    config = harness.SweepConfig.from_dict(cfg)

    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(config.to_json() + "\n")
    file_log = logging.FileHandler(out / "sweep.log", mode="a" if args.resume else "w")
    file_log.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    file_log.setLevel(logging.INFO)
    log.addHandler(file_log)
    try:
        log.info("sweep start: %s", config.to_json())

        def report(r):
            log.info("cell %s N=%d seed=%d ksd=%.6g walltime_s=%.3f %s", r.method, r.N, r.seed, r.ksd, r.walltime_s or 0.0, r.status)

        records = harness.run_sweep(
            config, out / "results.csv", workers=args.workers,
            record_timings=args.timings_in_results, resume=args.resume, on_record=report,
        )
        failed = [r for r in records if r.status != harness.OK]
        log.info("sweep done: %d records, %d failed", len(records), len(failed))
    finally:
        log.removeHandler(file_log)
        file_log.close()
    print(f"wrote {len(records)} records to {out / 'results.csv'}")
    if failed:
        print(f"{len(failed)} cell(s) failed:", file=sys.stderr)
        for r in failed:
            print(f"  {r.method} N={r.N} seed={r.seed}: {r.status}", file=sys.stderr)
        return EXIT_FAILED_CELLS
    return 0


def cmd_train(args) -> int:
    spec = parse_target(args.target)
    target = density.from_spec(spec)
    cfg = MPMCTrainConfig(
        epochs=args.epochs, lr=args.lr, weight_decay=args.weight_decay, hidden=args.hidden,
        layers=args.layers, seed=args.seed if args.seed is not None else 0,
    )
    try:
        res = stein_mpmc(target, args.n, cfg)
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_FAILED_CELLS
    value, h = ksd_and_bandwidth(res.points, target)
    if args.out:
        harness.write_points(res.points, args.out)
    if args.checkpoint:
        checkpoint.save(args.checkpoint, res.params, res.model, res.loss_trace)
    print(f"ksd {value:.12g}")
    print(f"bandwidth {h:.12g}")
    print(f"best_epoch {res.best_epoch}")
    return 0


def cmd_ksd(args) -> int:
    target = density.from_spec(parse_target(args.target))
    pts = harness.read_points(_require_file(args.points))
    pts = density.as_point_set(pts, target.dim)
    value, h = ksd_and_bandwidth(pts, target, args.bandwidth)
    print(f"ksd {value:.12g}")
    print(f"bandwidth {h:.12g}")
    return 0


def cmd_plot(args) -> int:
    records = harness.read_results(_require_file(args.results))
    svg = ksd_vs_n_svg(records, title=args.title)
    Path(args.out).write_text(svg)
    print(f"wrote {args.out}")
    return 0


def cmd_search(args) -> int:
    spec = parse_target(args.target)
    target = density.from_spec(spec)
    space = harness.SearchSpace(trials=args.trials, epochs=args.epochs)
    seed = args.seed if args.seed is not None else 0
    winners, table = {}, []
    for n in args.n:
        # one stream per N, so a value's result does not depend on the others in the list
        best, trials = harness.random_search(space, spec, n, np.random.default_rng([seed, n]), workers=args.workers)
        winners[n] = best
        table.extend(trials)
        if args.retrain_epochs:
            cfg = MPMCTrainConfig(epochs=args.retrain_epochs, seed=seed, **best)
            res = stein_mpmc(target, n, cfg)
            value, _ = ksd_and_bandwidth(res.points, target)
            print(f"retrained N={n} epochs={args.retrain_epochs}: ksd {value:.12g}", file=sys.stderr)
            if args.retrain_dir:
                Path(args.retrain_dir).mkdir(parents=True, exist_ok=True)
                harness.write_points(res.points, Path(args.retrain_dir) / f"points_N{n}.csv")
    if args.out:
        harness.write_trials(table, args.out)
    if len(winners) == 1:
        print(json.dumps(next(iter(winners.values())), sort_keys=True))
    else:
        print(json.dumps({str(n): hp for n, hp in winners.items()}, sort_keys=True))
    return 0


# --- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed (non-negative integer)")
    common.add_argument("--workers", type=int, default=argparse.SUPPRESS, help="worker processes (default: logical cores)")
    common.add_argument("--verbose", action="store_true", default=argparse.SUPPRESS, help="debug logging")

    parser = argparse.ArgumentParser(
        prog="stein-sampler",
        description="Generate and benchmark kernel-Stein-discrepancy point sets.",
        epilog=f"Log level can also be set with the {LOG_ENV} environment variable (e.g. INFO).",
        parents=[common],
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sweep", parents=[common], help="run the N-sweep benchmark")
    p.add_argument("--config", help="sweep config JSON (unknown keys are rejected)")
    p.add_argument("--out", help="output directory (default: config output_dir)")
    p.add_argument("--target", help="override the target: preset name, JSON object or JSON file")
    p.add_argument("--methods", help="comma-separated subset of " + ",".join(harness.METHODS))
    p.add_argument("--n", type=_int_list, help="comma-separated N values")
    p.add_argument("--seeds", type=int, help="seeds per cell")
    p.add_argument("--resume", action="store_true", help="skip cells already recorded as ok in results.csv")
    p.add_argument(
        "--timings-in-results", action="store_true",
        help="write wall-times into results.csv (otherwise they go to sweep.log only, keeping results.csv byte-reproducible)",
    )
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("train", parents=[common], help="train one Stein-MPMC model")
    p.add_argument("--target", default="gaussian_mixture_2d", help="preset name, JSON object or JSON file")
    p.add_argument("--n", type=int, default=100, help="number of points")
    p.add_argument("--epochs", type=int, default=MPMCTrainConfig.epochs)
    p.add_argument("--lr", type=float, default=MPMCTrainConfig.lr)
    p.add_argument("--hidden", type=int, default=MPMCTrainConfig.hidden)
    p.add_argument("--layers", type=int, default=MPMCTrainConfig.layers)
    p.add_argument("--weight-decay", type=float, default=MPMCTrainConfig.weight_decay)
    p.add_argument("--out", help="write the point set CSV here")
    p.add_argument("--checkpoint", help="write a parameter checkpoint here (plus a .json sidecar)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ksd", parents=[common], help="KSD of a point-set CSV")
    p.add_argument("points", help="CSV with header x1,...,xd")
    p.add_argument("--target", required=True, help="preset name, JSON object or JSON file")
    p.add_argument("--bandwidth", type=_bandwidth, default=KernelConfig(), help="'median' (default) or a fixed h")
    p.set_defaults(func=cmd_ksd)

    p = sub.add_parser("plot", parents=[common], help="SVG of KSD against N from a results CSV")
    p.add_argument("results", help="results CSV written by sweep")
    p.add_argument("--out", default="ksd_vs_n.svg")
    p.add_argument("--title")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("search", parents=[common], help="random hyperparameter search for Stein-MPMC")
    p.add_argument("--target", default="gaussian_mixture_2d", help="preset name, JSON object or JSON file")
    p.add_argument(
        "--n", type=_int_list, default=[100],
        help="point count used for tuning; a comma-separated list tunes each N separately (per-cell tuning)",
    )
    p.add_argument("--trials", type=int, default=harness.SearchSpace.trials)
    p.add_argument("--epochs", type=int, default=harness.SearchSpace.epochs, help="reduced per-trial budget")
    p.add_argument("--out", help="write the trial table CSV here")
    p.add_argument("--retrain-epochs", type=int, help="retrain each winner with this many epochs and report its KSD")
    p.add_argument("--retrain-dir", help="write retrained point sets here as points_N<n>.csv")
    p.set_defaults(func=cmd_search)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.seed = getattr(args, "seed", None)
    args.workers = getattr(args, "workers", None) or os.cpu_count() or 1
    args.verbose = getattr(args, "verbose", False)
    if args.seed is not None and args.seed < 0:
        parser.error("--seed must be non-negative")
    _configure_logging(args.verbose)
    try:
        return args.func(args)
    except (UsageError, ConfigError, ParseError, DomainError) as exc:
        where = f" (key: {exc.key})" if getattr(exc, "key", None) else ""
        print(f"error: {exc}{where}", file=sys.stderr)
        return EXIT_USAGE
    except SteinSamplerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED_CELLS


if __name__ == "__main__":
    sys.exit(main())
