"""N-sweep benchmark, random hyperparameter search and result files."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable

import numpy as np

from . import density as dens
from .checkpoint import canonical_json
from .errors import ConfigError, ParseError, SteinSamplerError
from .samplers import (
    MPMCTrainConfig,
    SteinPointsConfig,
    SVGDConfig,
    iid_baseline,
    stein_mpmc,
    stein_points,
    svgd,
)
from .stein_kernel import KernelConfig, ksd_and_bandwidth

log = logging.getLogger(__name__)

STEIN_MPMC = "stein_mpmc"
SVGD = "svgd"
STEIN_POINTS = "stein_points"
IID = "iid"
METHODS = (STEIN_MPMC, SVGD, STEIN_POINTS, IID)

DEFAULT_N_VALUES = tuple(range(20, 501, 40))
RESULT_COLUMNS = (
    "method", "target", "N", "seed", "ksd", "bandwidth", "walltime_s", "hparams_json", "config_hash", "status",
)
OK = "ok"

# Tunable fields per method; the seed is excluded because every cell gets
# its own stream from the sweep.
_METHOD_CONFIGS = {STEIN_MPMC: MPMCTrainConfig, SVGD: SVGDConfig, STEIN_POINTS: SteinPointsConfig}


def _tunables(cls) -> list[str]:
    return [f.name for f in dataclasses.fields(cls) if f.name != "seed"]


def _hparams(method: str, cfg) -> dict[str, Any]:
    if method == IID:
        return {}
    return {k: getattr(cfg, k) for k in _tunables(type(cfg))}


def _build_method_config(method: str, spec: dict[str, Any]):
    cls = _METHOD_CONFIGS[method]
    allowed = set(_tunables(cls))
    for key in spec:
        if key not in allowed:
            raise ConfigError(f"unknown key {method}.{key}; allowed: {sorted(allowed)}", key=f"{method}.{key}")
    try:
        return cls(**spec)
    except ConfigError as exc:
        raise ConfigError(str(exc), key=f"{method}.{exc.key}") from None
    except TypeError as exc:
        raise ConfigError(f"{method}: {exc}", key=method) from None


def target_name(spec) -> str:
    return spec if isinstance(spec, str) else str(spec.get("target"))


@dataclass(frozen=True)
class SweepConfig:
    """Everything that determines a sweep's results.

    ``method_configs`` maps a method name to keyword overrides of its config
    dataclass.  ``output_dir`` is where the CLI writes files and does not
    influence any result.
    """

    target: Any = "gaussian_mixture_2d"
    methods: tuple[str, ...] = METHODS
    n_values: tuple[int, ...] = DEFAULT_N_VALUES
    seeds: int = 3
    master_seed: int = 0
    method_configs: dict[str, dict[str, Any]] = field(default_factory=dict)
    bandwidth: Any = "median"
    output_dir: str = "results"

    _KEYS = ("target", "methods", "n_values", "seeds", "master_seed", "bandwidth", "output_dir") + tuple(_METHOD_CONFIGS)

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "n_values", tuple(int(n) for n in self.n_values))
        if not self.methods:
            raise ConfigError("at least one method is required", key="methods")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}; choose from {list(METHODS)}", key="methods")
        if len(set(self.methods)) != len(self.methods):
            raise ConfigError("methods must not repeat", key="methods")
        ns = self.n_values
        if not ns or ns[0] < 2 or any(b <= a for a, b in zip(ns, ns[1:])):
            raise ConfigError("n_values must be strictly increasing and >= 2", key="n_values")
        if self.seeds < 1:
            raise ConfigError("seeds must be >= 1", key="seeds")
        if self.master_seed < 0:
            raise ConfigError("master_seed must be a non-negative integer", key="master_seed")
        for m in self.method_configs:
            if m not in _METHOD_CONFIGS:
                raise ConfigError(f"no configurable options for method {m!r}", key=m)
        self.density()
        self.kernel()
        for m in self.methods:
            self.method_config(m)

    def density(self) -> dens.ScoredDensity:
        return dens.from_spec(self.target)

    def kernel(self) -> KernelConfig:
        return KernelConfig.from_spec(self.bandwidth)

    def method_config(self, method: str):
        if method == IID:
            return None
        return _build_method_config(method, self.method_configs.get(method, {}))

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> SweepConfig:
        if not isinstance(data, dict):
            raise ConfigError("sweep config must be a JSON object")
        for key in data:
            if key not in cls._KEYS:
                raise ConfigError(f"unknown config key {key!r}", key=key)
        kw = {k: data[k] for k in ("target", "methods", "n_values", "seeds", "master_seed", "bandwidth", "output_dir") if k in data}
        for m in _METHOD_CONFIGS:
            if m in data and not isinstance(data[m], dict):
                raise ConfigError(f"{m} must be an object", key=m)
        kw["method_configs"] = {m: dict(data[m]) for m in _METHOD_CONFIGS if m in data}
        return cls(**kw)

    @classmethod
    def load(cls, path) -> SweepConfig:
        path = Path(path)
        try:
            text = path.read_text()
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}", key=str(path)) from None
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
        return cls.from_dict(data)

    def to_dict(self) -> dict[str, Any]:
        out = {
            "target": self.target,
            "methods": list(self.methods),
            "n_values": list(self.n_values),
            "seeds": self.seeds,
            "master_seed": self.master_seed,
            "bandwidth": self.bandwidth,
            "output_dir": self.output_dir,
        }
        out.update({m: dict(v) for m, v in self.method_configs.items()})
        return out

    def to_json(self) -> str:
        return canonical_json(self.to_dict())


@dataclass
class RunRecord:
    method: str
    target: str
    N: int
    seed: int
    ksd: float
    bandwidth: float
    walltime_s: float | None
    hparams_json: str
    config_hash: str
    status: str = OK

    @property
    def key(self) -> tuple[str, int, int]:
        return (self.method, self.N, self.seed)


def cell_rng(master_seed: int, method: str, n: int | str, seed: int) -> np.random.Generator:
    """Independent stream for one sweep cell, keyed by its identity alone."""
    digest = hashlib.sha256(f"{master_seed}|{method}|{n}|{seed}".encode()).digest()
    return np.random.default_rng(np.random.SeedSequence(int.from_bytes(digest[:16], "little")))


def config_hash(target, method: str, hparams: dict[str, Any], bandwidth) -> str:
    """Git-style SHA-1 of the canonical JSON for what determines a cell's algorithm."""
    body = canonical_json({"target": target, "method": method, "hparams": hparams, "bandwidth": bandwidth}).encode()
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


# --- sweep execution ------------------------------------------------------


@dataclass(frozen=True)
class _Task:
    """One unit of work: a single (method, N, seed) cell, or a whole Stein Points run."""

    config: SweepConfig
    method: str
    seed: int
    n_values: tuple[int, ...]


def _failure(task: _Task, n: int, exc: BaseException, base: dict) -> RunRecord:
    msg = " ".join(str(exc).split())
    return RunRecord(
        task.method, base["target"], n, task.seed, math.nan, math.nan, base["elapsed"],
        base["hparams"], base["hash"], f"error: {type(exc).__name__}: {msg}",
    )


def _run_task(task: _Task) -> list[RunRecord]:
    cfg = task.config
    target = cfg.density()
    kernel = cfg.kernel()
    method_cfg = cfg.method_config(task.method)
    hp = _hparams(task.method, method_cfg)
    base = {
        "target": target_name(cfg.target),
        "hparams": canonical_json(hp),
        "hash": config_hash(cfg.target, task.method, hp, cfg.bandwidth),
        "elapsed": None,
    }

    def record(n, points, elapsed, fallback=None):
        value, h = ksd_and_bandwidth(points, target, kernel, fallback)
        return RunRecord(task.method, base["target"], n, task.seed, value, h, elapsed, base["hparams"], base["hash"])

    if task.method == STEIN_POINTS:
        rng = cell_rng(cfg.master_seed, task.method, "sequential", task.seed)
        start = time.perf_counter()
        try:
            res = stein_points(target, max(task.n_values), method_cfg, rng, checkpoints=task.n_values)
        except (SteinSamplerError, ArithmeticError, ValueError) as exc:
            base["elapsed"] = time.perf_counter() - start
            return [_failure(task, n, exc, base) for n in task.n_values]
        out, previous = [], 0.0
        for n in task.n_values:
            # each record carries the time spent growing the set since the previous checkpoint
            out.append(record(n, res.points[:n], res.elapsed[n] - previous, res.reference_bandwidth))
            previous = res.elapsed[n]
        return out

    (n,) = task.n_values
    rng = cell_rng(cfg.master_seed, task.method, n, task.seed)
    start = time.perf_counter()
    try:
        if task.method == STEIN_MPMC:
            points = stein_mpmc(target, n, method_cfg, rng).points
        elif task.method == SVGD:
            points = svgd(target, n, method_cfg, rng)
        else:
            points = iid_baseline(target, n, rng)
        elapsed = time.perf_counter() - start
        return [record(n, points, elapsed)]
    except (SteinSamplerError, ArithmeticError, ValueError) as exc:
        base["elapsed"] = time.perf_counter() - start
        return [_failure(task, n, exc, base)]


def _tasks(config: SweepConfig) -> list[_Task]:
    tasks = []
    for method in config.methods:
        for seed in range(config.seeds):
            if method == STEIN_POINTS:
                tasks.append(_Task(config, method, seed, config.n_values))
            else:
                tasks.extend(_Task(config, method, seed, (n,)) for n in config.n_values)
    return tasks


def _order(config: SweepConfig, records: Iterable[RunRecord]) -> list[RunRecord]:
    rank = {m: i for i, m in enumerate(config.methods)}
    return sorted(records, key=lambda r: (rank[r.method], r.N, r.seed))


def run_sweep(
    config: SweepConfig,
    results_path=None,
    workers: int = 1,
    record_timings: bool = True,
    resume: bool = False,
    on_record: Callable[[RunRecord], None] | None = None,
) -> list[RunRecord]:
    """Run every (method, N, seed) cell and return records in canonical order.

    When ``results_path`` is given, each record is appended to it as soon as
    its cell finishes, and the file is rewritten in canonical order at the
    end, so a finished file does not depend on scheduling.  With ``resume``,
    cells already recorded as successful in that file are not re-run.
    ``record_timings=False`` leaves ``walltime_s`` empty in the file (the
    in-memory records keep the measurements).
    """
    done: dict[tuple, RunRecord] = {}
    if resume and results_path is not None and Path(results_path).exists():
        done = {r.key: r for r in read_results(results_path) if r.status == OK}
    tasks = [t for t in _tasks(config) if any((t.method, n, t.seed) not in done for n in t.n_values)]
    path = Path(results_path) if results_path is not None else None
    if path is not None:
        write_results(_order(config, done.values()), path, record_timings)

    collected = list(done.values())

    def accept(batch: list[RunRecord]):
        for r in batch:
            if r.key in done:
                continue
            collected.append(r)
            if path is not None:
                _append_record(r, path, record_timings)
            if on_record is not None:
                on_record(r)

    if workers <= 1 or len(tasks) <= 1:
        for t in tasks:
            accept(_run_task(t))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_task, t) for t in tasks]
            for fut in as_completed(futures):
                accept(fut.result())

    records = _order(config, collected)
    if path is not None:
        write_results(records, path, record_timings)
    return records


# --- result files -----------------------------------------------------------


def _fmt(x: float | None) -> str:
    if x is None:
        return ""
    return format(float(x), ".17g")


def _row(r: RunRecord, record_timings: bool = True) -> list[str]:
    return [
        r.method, r.target, str(r.N), str(r.seed), _fmt(r.ksd), _fmt(r.bandwidth),
        _fmt(r.walltime_s) if record_timings else "", r.hparams_json, r.config_hash, r.status,
    ]


def write_results(records: Iterable[RunRecord], path, record_timings: bool = True) -> None:
    """Write a results CSV atomically (temp file, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for r in records:
        w.writerow(_row(r, record_timings))
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(buf.getvalue())
    os.replace(tmp, path)


def _append_record(r: RunRecord, path: Path, record_timings: bool) -> None:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerow(_row(r, record_timings))
    with open(path, "a") as fh:
        fh.write(buf.getvalue())
        fh.flush()
        os.fsync(fh.fileno())


def _parse_float(text: str, line: int, column: str, optional: bool = False) -> float | None:
    if optional and text == "":
        return None
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"line {line}: column {column!r} is not a number: {text!r}", line=line) from None


def _parse_int(text: str, line: int, column: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise ParseError(f"line {line}: column {column!r} is not an integer: {text!r}", line=line) from None


def read_results(path) -> list[RunRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(f"{path}: empty file, expected a header", line=1)
    header = rows[0]
    unknown = [c for c in header if c not in RESULT_COLUMNS]
    if unknown:
        raise ParseError(f"{path}: unknown column {unknown[0]!r}", line=1)
    if tuple(header) != RESULT_COLUMNS:
        missing = [c for c in RESULT_COLUMNS if c not in header]
        detail = f"missing column {missing[0]!r}" if missing else "columns out of order"
        raise ParseError(f"{path}: {detail}; expected {','.join(RESULT_COLUMNS)}", line=1)
    out = []
    for line, row in enumerate(rows[1:], start=2):
        if len(row) != len(RESULT_COLUMNS):
            raise ParseError(f"{path}: line {line} has {len(row)} fields, expected {len(RESULT_COLUMNS)}", line=line)
        v = dict(zip(RESULT_COLUMNS, row))
        out.append(RunRecord(
            method=v["method"],
            target=v["target"],
            N=_parse_int(v["N"], line, "N"),
            seed=_parse_int(v["seed"], line, "seed"),
            ksd=_parse_float(v["ksd"], line, "ksd"),
            bandwidth=_parse_float(v["bandwidth"], line, "bandwidth"),
            walltime_s=_parse_float(v["walltime_s"], line, "walltime_s", optional=True),
            hparams_json=v["hparams_json"],
            config_hash=v["config_hash"],
            status=v["status"],
        ))
    return out


def write_points(points, path) -> None:
    x = dens.as_point_set(points)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"x{i + 1}" for i in range(x.shape[1])])
    for row in x:
        w.writerow([_fmt(v) for v in row])
    Path(path).write_text(buf.getvalue())


def read_points(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise ParseError(f"{path}: empty point file", line=1)
    header = rows[0]
    expected = [f"x{i + 1}" for i in range(len(header))]
    if header != expected:
        raise ParseError(f"{path}: header must be {','.join(expected)}", line=1)
    if len(rows) == 1:
        raise ParseError(f"{path}: no points after the header", line=2)
    data = []
    for line, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ParseError(f"{path}: line {line} has {len(row)} values, expected {len(header)}", line=line)
        data.append([_parse_float(t, line, c) for t, c in zip(row, header)])
    arr = np.array(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ParseError(f"{path}: non-finite coordinate", line=2 + int(np.argwhere(~np.isfinite(arr))[0, 0]))
    return arr


# --- random search ----------------------------------------------------------


@dataclass(frozen=True)
class SearchSpace:
    lr: tuple[float, float] = (1e-4, 1e-2)
    hidden: tuple[int, ...] = (32, 64, 128, 256)
    layers: tuple[int, int] = (1, 5)
    weight_decay: tuple[float, float] = (1e-6, 1e-2)
    trials: int = 30
    epochs: int = 5000

    def __post_init__(self):
        for name in ("lr", "weight_decay"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ConfigError(f"{name} bounds must satisfy 0 < low <= high", key=name)
        if not self.hidden or min(self.hidden) < 1:
            raise ConfigError("hidden sizes must be positive", key="hidden")
        if not 1 <= self.layers[0] <= self.layers[1]:
            raise ConfigError("layer bounds must satisfy 1 <= low <= high", key="layers")
        if self.trials < 1:
            raise ConfigError("trial count must be >= 1", key="trials")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1", key="epochs")

    def sample(self, rng: np.random.Generator) -> dict[str, Any]:
        def log_uniform(lo, hi):
            return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))

        return {
            "lr": log_uniform(*self.lr),
            "hidden": int(rng.choice(self.hidden)),
            "layers": int(rng.integers(self.layers[0], self.layers[1] + 1)),
            "weight_decay": log_uniform(*self.weight_decay),
        }


@dataclass
class TrialRecord:
    trial: int
    N: int
    hparams: dict[str, Any]
    ksd: float
    status: str = OK


def _run_trial(args) -> TrialRecord:
    i, hp, epochs, target_spec, n, rng = args
    target = dens.from_spec(target_spec)
    try:
        cfg = MPMCTrainConfig(epochs=epochs, **hp)
        res = stein_mpmc(target, n, cfg, rng)
        value, _ = ksd_and_bandwidth(res.points, target)
        return TrialRecord(i, n, hp, value)
    except (SteinSamplerError, ArithmeticError, ValueError) as exc:
        return TrialRecord(i, n, hp, math.nan, f"error: {type(exc).__name__}: {' '.join(str(exc).split())}")


def random_search(space: SearchSpace, target_spec, n: int, rng: np.random.Generator, workers: int = 1):
    """Train one reduced-budget model per sampled configuration; return ``(best, trials)``.

    All configurations are drawn up front, and each trial trains from its
    own child stream, so results do not depend on ``workers``.
    """
    dens.from_spec(target_spec)
    hps = [space.sample(rng) for _ in range(space.trials)]
    children = rng.spawn(space.trials)
    jobs = [(i, hp, space.epochs, target_spec, n, child) for i, (hp, child) in enumerate(zip(hps, children))]
    if workers <= 1:
        trials = [_run_trial(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            trials = list(pool.map(_run_trial, jobs))
    ok = [t for t in trials if t.status == OK]
    if not ok:
        raise SteinSamplerError(f"all {len(trials)} search trials diverged")
    best = min(ok, key=lambda t: (t.ksd, t.trial))
    return dict(best.hparams), trials


def write_trials(trials: list[TrialRecord], path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["trial", "N", "lr", "hidden", "layers", "weight_decay", "ksd", "status"])
    for t in trials:
        hp = t.hparams
        w.writerow([t.trial, t.N, _fmt(hp["lr"]), hp["hidden"], hp["layers"], _fmt(hp["weight_decay"]), _fmt(t.ksd), t.status])
    Path(path).write_text(buf.getvalue())
