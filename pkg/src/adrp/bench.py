"""Step-timing harness: warmup, median of repetitions, relative speed, speedup.

Relative speed is ``baseline_ms / subject_ms`` (values above 1 mean the
subject is faster). A speedup of ``p`` percent means the subject needs
``(1 - p/100)`` of the reference runtime.
"""
from __future__ import annotations

import gc
import logging
import os
import platform
import re
import statistics
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Callable, Sequence

import numpy as np
from scipy import stats as sps
from threadpoolctl import threadpool_info, threadpool_limits

from . import tensor as T
from .adapters import AdapterConfig, AdapterSet, DropPolicy
from .encoder import EncoderConfig, EncoderWeights, TaskHead
from .errors import ContractError
from .fusion import FusionStack
from .models import AdapterModel, FullModel, FusionModel
from .multitask import TaskSet, TaskSpec, shared_infer
from .trainer import Adam, TrainConfig, train_step

log = logging.getLogger(__name__)

MODES = ("training_step", "inference_step")
CSV_COLUMNS = ["subject", "mode", "seq_len", "batch", "reps", "median_ms", "relative_speed",
               "speedup_pct", "n_dropped", "num_adapters", "threads", "machine"]
PAPER_GRID = [(s, b) for s in (64, 128, 256, 512) for b in (16, 32, 64, 128)]

_suite_lock = threading.Lock()


def thread_count() -> int:
    env = os.environ.get("ADRP_THREADS")
    if env:
        return int(env)
    counts = [p.get("num_threads", 1) for p in threadpool_info() if p.get("user_api") == "blas"]
    return max(counts) if counts else 1


@dataclass
class BenchConfig:
    reps: int = 300
    warmup_reps: int = 20
    grid: list = field(default_factory=lambda: [(128, 16)])
    mode: str = "inference_step"
    thread_count: int | None = None
    machine: str = field(default_factory=platform.node)
    seed: int = 0

    def __post_init__(self):
        if self.reps < 30:
            raise ContractError(f"reps must be >= 30, got {self.reps}")
        if not 0 <= self.warmup_reps < self.reps:
            raise ContractError("warmup_reps must be in [0, reps)")
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}")
        self.grid = [tuple(int(v) for v in g) for g in self.grid]
        if self.thread_count is None:
            self.thread_count = thread_count()


class StepFailed(RuntimeError):
    def __init__(self, rep: int, cause: BaseException):
        super().__init__(f"step raised at rep {rep}: {cause!r}")
        self.rep = rep


def time_samples(step_fn: Callable[[], object], config: BenchConfig) -> np.ndarray:
    """Per-rep wall times in ms (warmup excluded); one monotonic-clock window per step."""
    for i in range(config.warmup_reps):
        try:
            step_fn()
        except Exception as e:
            raise StepFailed(i, e) from e
    out = np.empty(config.reps)
    clock = time.perf_counter_ns
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        for i in range(config.reps):
            t0 = clock()
            try:
                step_fn()
            except Exception as e:
                raise StepFailed(config.warmup_reps + i, e) from e
            out[i] = (clock() - t0) / 1e6
            gc.collect(0)
    finally:
        if gc_was_enabled:
            gc.enable()
    return out


def time_step(step_fn: Callable[[], object], config: BenchConfig) -> float:
    return float(np.median(time_samples(step_fn, config)))


def relative_speed(subject_ms: float, baseline_ms: float) -> float:
    if not (subject_ms > 0 and baseline_ms > 0):
        raise ContractError(f"times must be positive, got {subject_ms}, {baseline_ms}")
    return baseline_ms / subject_ms


def speedup(t_without_ms: float, t_with_ms: float) -> float:
    if not (t_without_ms > 0 and t_with_ms > 0):
        raise ContractError(f"times must be positive, got {t_without_ms}, {t_with_ms}")
    return (1.0 - t_with_ms / t_without_ms) * 100.0


@dataclass(frozen=True)
class LineFit:
    slope: float
    intercept: float
    r_squared: float


def fit_line(xs: Sequence[float], ys: Sequence[float]) -> LineFit:
    xs, ys = np.asarray(xs, float), np.asarray(ys, float)
    if len(xs) < 2:
        return LineFit(float("nan"), float("nan"), float("nan"))
    if np.ptp(ys) == 0:
        return LineFit(0.0, float(ys[0]), 1.0)
    res = sps.linregress(xs, ys)
    return LineFit(float(res.slope), float(res.intercept), float(res.rvalue ** 2))


@dataclass(frozen=True)
class MonotoneCheck:
    ok: bool
    violations: int
    pairs: int


def check_monotone(values: Sequence[float], direction: str = "increasing", tol: float = 0.01,
                   max_violation_frac: float = 0.10) -> MonotoneCheck:
    """Adjacent-pair monotonicity with a relative noise band.

    A pair violates if it moves the wrong way by more than ``tol`` (relative);
    the check fails when more than ``max_violation_frac`` of pairs violate.
    """
    v = np.asarray(values, float)
    sign = 1.0 if direction == "increasing" else -1.0
    bad = 0
    for a, b in zip(v[:-1], v[1:]):
        if sign * (b - a) < -tol * abs(a):
            bad += 1
    pairs = max(0, len(v) - 1)
    return MonotoneCheck(bad <= max_violation_frac * pairs, bad, pairs)


def strictly_monotone(values: Sequence[float], direction: str = "increasing") -> bool:
    v = np.asarray(values, float)
    d = np.diff(v)
    return bool(np.all(d > 0)) if direction == "increasing" else bool(np.all(d < 0))


# subjects --------------------------------------------------------------------------------------

@dataclass
class Subject:
    """Something timed at each grid point. ``build(seq_len, batch)`` returns the step closure."""

    name: str
    build: Callable[[int, int], Callable[[], object]]
    n_dropped: int = 0
    num_adapters: int = 0
    baseline: str | None = None
    speedup_ref: str | None = None


_SUBJECT_RE = re.compile(
    r"^(?P<kind>full|bare|adapter-pfeiffer|adapter-houlsby|fusion-(?P<n>\d+)(?P<par>-parallel)?"
    r"|multitask-(?P<tasks>\d+))(?:-drop(?P<drop>\d+))?$")


def _step_closure(model, mode: str, tokens: np.ndarray, labels: np.ndarray, drop_n: int, seed: int):
    if mode == "inference_step":
        def infer():
            with T.no_grad():
                return model.forward(tokens, drop_n=drop_n)
        return infer
    cfg = TrainConfig(drop_policy=DropPolicy.specialized(drop_n), seed=seed)
    opt = Adam(model.trainable(), cfg.lr)
    rng = np.random.default_rng(seed)
    return lambda: train_step((tokens, labels), model, cfg, rng, opt)


def make_subject(spec: str, encoder_config: EncoderConfig, mode: str, num_classes: int = 2,
                 compression_rate: float = 16.0, seed: int = 0,
                 baseline: str | None = "full") -> Subject:
    """Build a named subject.

    Names: ``full``, ``bare``, ``adapter-pfeiffer``, ``adapter-houlsby``,
    ``fusion-N``, ``fusion-N-parallel``, ``multitask-N`` (inference only), each
    optionally suffixed ``-dropK`` (adapters / fusion / task branches removed
    from the lowest K layers).
    """
    m = _SUBJECT_RE.match(spec)
    if not m:
        raise ContractError(f"unknown bench subject {spec!r}")
    kind = m.group("kind")
    drop = int(m.group("drop") or 0)
    if not 0 <= drop <= encoder_config.num_layers:
        raise ContractError(f"{spec}: drop level outside [0, {encoder_config.num_layers}]")
    n_adapters = 0
    if kind.startswith("adapter"):
        n_adapters = 1
    elif m.group("n"):
        n_adapters = int(m.group("n"))
    elif m.group("tasks"):
        n_adapters = int(m.group("tasks"))
        if mode != "inference_step":
            raise ContractError("multitask subjects are inference-only")

    def build(seq_len: int, batch: int):
        rng = np.random.default_rng(seed)
        weights = EncoderWeights.initialize(encoder_config)
        tokens = rng.integers(0, encoder_config.vocab_size, size=(batch, seq_len))
        labels = rng.integers(0, num_classes, size=batch)

        def head():
            return TaskHead.initialize(encoder_config.hidden, num_classes, rng, encoder_config.dtype)

        def adapters(arch):
            return AdapterSet.initialize(AdapterConfig(arch, compression_rate), encoder_config, rng, up_std=0.02)

        if kind == "full":
            model = FullModel(encoder_config, weights, head())
        elif kind == "bare":
            model = AdapterModel(encoder_config, weights, head(), None)
        elif kind.startswith("adapter"):
            model = AdapterModel(encoder_config, weights, head(), adapters(kind.split("-")[1]))
        elif kind.startswith("fusion"):
            stack = FusionStack.initialize([adapters("pfeiffer") for _ in range(n_adapters)],
                                           encoder_config, rng,
                                           strategy="parallel" if m.group("par") else "iterative")
            model = FusionModel(encoder_config, weights, head(), stack)
        else:
            ts = TaskSet(encoder_config, weights,
                         [TaskSpec(f"t{i}", adapters("pfeiffer"), head(), drop) for i in range(n_adapters)])
            return lambda: shared_infer(tokens, ts)
        return _step_closure(model, mode, tokens, labels, drop, seed)

    return Subject(spec, build, n_dropped=drop, num_adapters=n_adapters,
                   baseline=None if spec == baseline else baseline)


@dataclass
class BenchReport:
    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def row(self, subject: str, seq_len: int, batch: int) -> dict | None:
        for r in self.rows:
            if r["subject"] == subject and r["seq_len"] == seq_len and r["batch"] == batch:
                return r
        return None

    def median(self, subject: str, seq_len: int, batch: int) -> float | None:
        r = self.row(subject, seq_len, batch)
        return None if r is None else r["median_ms"]


def bench_suite(subjects: Sequence[Subject], config: BenchConfig) -> BenchReport:
    """Time every subject at every grid point, one at a time.

    Points that raise ``MemoryError`` are recorded with an empty median.
    """
    if not _suite_lock.acquire(blocking=False):
        raise RuntimeError("another benchmark suite is already running in this process")
    try:
        report = BenchReport(metadata={
            "seed": config.seed, "threads": config.thread_count, "machine": config.machine,
            "mode": config.mode, "reps": config.reps, "warmup_reps": config.warmup_reps,
            "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "flags": [],
        })
        for seq_len, batch in config.grid:
            if batch == 1:
                # reported, not modelled: timings here reflect an under-filled machine
                report.metadata["flags"].append(f"{seq_len}x{batch}: batch size 1 is an under-capacity regime")
        with threadpool_limits(limits=config.thread_count, user_api="blas"):
            for seq_len, batch in config.grid:
                for subj in subjects:
                    row = {"subject": subj.name, "mode": config.mode, "seq_len": seq_len, "batch": batch,
                           "reps": config.reps, "median_ms": None, "relative_speed": None,
                           "speedup_pct": None, "n_dropped": subj.n_dropped,
                           "num_adapters": subj.num_adapters, "threads": config.thread_count,
                           "machine": config.machine}
                    try:
                        step = subj.build(seq_len, batch)
                        row["median_ms"] = time_step(step, config)
                    except MemoryError:
                        log.warning("%s at %dx%d: out of memory, recorded as missing", subj.name, seq_len, batch)
                    finally:
                        step = None
                        gc.collect()
                    log.info("%s seq=%d batch=%d median=%s ms", subj.name, seq_len, batch, row["median_ms"])
                    report.rows.append(row)
        for r in report.rows:
            subj = next(s for s in subjects if s.name == r["subject"])
            if r["median_ms"] is None:
                continue
            if subj.baseline:
                base = report.median(subj.baseline, r["seq_len"], r["batch"])
                if base:
                    r["relative_speed"] = relative_speed(r["median_ms"], base)
            if subj.speedup_ref:
                ref = report.median(subj.speedup_ref, r["seq_len"], r["batch"])
                if ref:
                    r["speedup_pct"] = speedup(ref, r["median_ms"])
        return report
    finally:
        _suite_lock.release()
