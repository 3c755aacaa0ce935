"""Multi-task inference on one input with a shared, adapter-free lower trunk.

Every task's adapters are dropped from its first ``drop_n`` layers, so the
lowest ``min(drop_n)`` layers are identical across tasks and run once. Each
task then continues from the same trunk activation with its own hooks.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .adapters import AdapterSet
from .encoder import EncoderConfig, EncoderWeights, Hook, TaskHead, classify, embed, run_layers
from .errors import ContractError
from .fusion import FusionStack
from .tensor import Tensor


@dataclass
class TaskSpec:
    task_id: str
    module: AdapterSet | FusionStack | None
    head: TaskHead
    drop_n: int = 0

    def hooks(self) -> list[Hook]:
        return [] if self.module is None else self.module.hooks()


@dataclass
class TaskSet:
    config: EncoderConfig
    weights: EncoderWeights
    tasks: list[TaskSpec] = field(default_factory=list)

    def __post_init__(self):
        L = self.config.num_layers
        for t in self.tasks:
            if not 0 <= t.drop_n <= L:
                raise ContractError(f"task {t.task_id}: drop_n {t.drop_n} outside [0, {L}]")


@dataclass(frozen=True)
class SharingPlan:
    shared_prefix: int
    branches: dict  # task_id -> (start layer, drop_n)


def plan_sharing(taskset: TaskSet) -> SharingPlan:
    if not taskset.tasks:
        raise ContractError("task set is empty")
    prefix = min(t.drop_n for t in taskset.tasks)
    return SharingPlan(prefix, {t.task_id: (prefix, t.drop_n) for t in taskset.tasks})


@dataclass
class SharedInferenceResult:
    logits: dict
    plan: SharingPlan
    concurrent: bool
    trunk_copies: int = 0


def _branch(trunk: Tensor, task: TaskSpec, taskset: TaskSet, start: int) -> np.ndarray:
    h = run_layers(trunk, taskset.config, taskset.weights, task.hooks(), start,
                   taskset.config.num_layers, drop_n=task.drop_n)
    return classify(h, task.head).data


def shared_infer(tokens: np.ndarray, taskset: TaskSet, concurrent: bool = False) -> SharedInferenceResult:
    """Run the shared prefix once, then every task's remaining layers.

    Branches read the trunk activation without copying it.
    """
    plan = plan_sharing(taskset)
    with T.no_grad():
        h = embed(tokens, taskset.config, taskset.weights)
        trunk = run_layers(h, taskset.config, taskset.weights, None, 0, plan.shared_prefix)
        if concurrent and len(taskset.tasks) > 1:
            with ThreadPoolExecutor(max_workers=len(taskset.tasks)) as pool:
                futures = {t.task_id: pool.submit(_branch, trunk, t, taskset, plan.shared_prefix)
                           for t in taskset.tasks}
                logits = {k: f.result() for k, f in futures.items()}
        else:
            logits = {t.task_id: _branch(trunk, t, taskset, plan.shared_prefix) for t in taskset.tasks}
    return SharedInferenceResult(logits, plan, concurrent and len(taskset.tasks) > 1)


def independent_infer(tokens: np.ndarray, taskset: TaskSet) -> dict:
    """Oracle path: each task runs the full encoder on its own."""
    out = {}
    with T.no_grad():
        for t in taskset.tasks:
            h = embed(tokens, taskset.config, taskset.weights)
            h = run_layers(h, taskset.config, taskset.weights, t.hooks(), 0,
                           taskset.config.num_layers, drop_n=t.drop_n)
            out[t.task_id] = classify(h, t.head).data
    return out


def with_uniform_drop(taskset: TaskSet, n: int) -> TaskSet:
    return TaskSet(taskset.config, taskset.weights,
                   [TaskSpec(t.task_id, t.module, t.head, n) for t in taskset.tasks])


def measure_multitask_speedup(taskset: TaskSet, batch: int, seq_len: int, bench_config,
                              shared_levels=None, baseline_full_ms: float | None = None,
                              rng: np.random.Generator | None = None) -> list[dict]:
    """Median shared-inference time for every shared-prefix level.

    ``speedup_pct`` is relative to ``n_shared = 0``; ``per_layer_speedup`` is
    the slope of a least-squares line through speedup vs ``n_shared``.
    ``baseline_full_ms``, when given, is the time for running all tasks as
    separate fully fine-tuned models in sequence.
    """
    from .bench import fit_line, speedup, time_step, relative_speed

    L = taskset.config.num_layers
    levels = list(range(L + 1)) if shared_levels is None else list(shared_levels)
    rng = rng or np.random.default_rng(0)
    tokens = rng.integers(0, taskset.config.vocab_size, size=(batch, seq_len))
    rows = []
    for n in levels:
        ts = with_uniform_drop(taskset, n)
        ms = time_step(lambda: shared_infer(tokens, ts), bench_config)
        rows.append({"n_shared": n, "num_tasks": len(taskset.tasks), "batch": batch,
                     "seq_len": seq_len, "median_ms": ms})
    base = next((r["median_ms"] for r in rows if r["n_shared"] == 0), rows[0]["median_ms"])
    for r in rows:
        r["speedup_pct"] = speedup(base, r["median_ms"])
        r["relative_speed_vs_sequential_full_models"] = (
            relative_speed(r["median_ms"], baseline_full_ms) if baseline_full_ms else float("nan"))
    fit = fit_line([r["n_shared"] for r in rows], [r["speedup_pct"] for r in rows])
    for r in rows:
        r["per_layer_speedup"] = fit.slope
        r["r_squared"] = fit.r_squared
    return rows
