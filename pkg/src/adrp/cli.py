"""Command-line entry point: ``adrp <subcommand> ...``."""
from __future__ import annotations

import argparse
import logging
import re
import sys
from pathlib import Path

import numpy as np

from .adapters import AdapterConfig, AdapterSet
from .bench import CSV_COLUMNS, BenchConfig, bench_suite, make_subject, time_step
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, parse_range
from .encoder import EncoderConfig, EncoderWeights, TaskHead, classify, encode
from .errors import AdrpError, ConfigError, ContractError, IntegrityError
from .fusion import FusionStack, prune_fusion, record_activations
from .models import AdapterModel, FullModel, FusionModel, Model, load_state, state_dict
from .multitask import TaskSet, TaskSpec, measure_multitask_speedup
from .report import BENCH_PLOTS, PlotSpec, emit_report, read_csv, write_csv
from .trainer import evaluate, fit, train_fusion
from . import tensor as T

log = logging.getLogger("adrp")

EVAL_COLUMNS = ["n", "accuracy"]
METRIC_COLUMNS = ["epoch", "train_loss", "dev_acc", "sampled_n_histogram"]
STATS_COLUMNS = ["layer", "adapter_id", "mean_activation", "samples"]
MULTI_COLUMNS = ["n_shared", "num_tasks", "batch", "seq_len", "median_ms", "speedup_pct",
                 "relative_speed_vs_sequential_full_models", "per_layer_speedup", "r_squared"]


# model construction / checkpoint mapping ------------------------------------------------------

def _checkpoint_kind(arrays: dict) -> str:
    if any(k.startswith("fusion/") for k in arrays):
        return "fusion"
    if any(k.startswith("encoder/") for k in arrays):
        return "full"
    if any(k.startswith("adapter/") for k in arrays):
        return "adapter"
    return "bare"


def _num_fused(arrays: dict) -> int:
    ids = {int(m.group(1)) for k in arrays if (m := re.match(r"fusion/adapter/(\d+)/", k))}
    return len(ids)


def _head_classes(arrays: dict) -> int:
    if "head/weight" not in arrays:
        raise IntegrityError("checkpoint has no head/weight tensor")
    return int(arrays["head/weight"].shape[1])


def build_model(rc: RunConfig, kind: str, num_classes: int, num_fused: int = 0, seed: int = 0) -> Model:
    """Fresh model skeleton; base weights always come from ``encoder.seed``."""
    enc = rc.encoder()
    weights = EncoderWeights.initialize(enc)
    rng = np.random.default_rng(seed)
    head = TaskHead.initialize(enc.hidden, num_classes, rng, enc.dtype)
    if kind == "full":
        return FullModel(enc, weights, head)
    if kind == "bare":
        return AdapterModel(enc, weights, head, None)
    if kind == "adapter":
        return AdapterModel(enc, weights, head, AdapterSet.initialize(rc.adapter(), enc, rng))
    if kind == "fusion":
        acfg = AdapterConfig("pfeiffer", rc["adapter.compression_rate"])
        adapters = [AdapterSet.initialize(acfg, enc, rng) for _ in range(num_fused)]
        stack = FusionStack.initialize(adapters, enc, rng, strategy=rc["fusion.strategy"])
        return FusionModel(enc, weights, head, stack)
    raise ContractError(f"unknown model kind {kind!r}")


def load_model(rc: RunConfig, path: str) -> Model:
    arrays = load_checkpoint(path)
    kind = _checkpoint_kind(arrays)
    model = build_model(rc, kind, _head_classes(arrays), _num_fused(arrays))
    load_state(model, arrays)
    return model


def load_adapter_set(rc: RunConfig, path: str) -> tuple[AdapterSet, TaskHead]:
    model = load_model(rc, path)
    if not isinstance(model, AdapterModel) or model.adapters is None:
        raise ContractError(f"{path} is not an adapter checkpoint")
    return model.adapters, model.head


# subcommands ---------------------------------------------------------------------------------

def cmd_train(args, rc: RunConfig) -> int:
    mode = rc["train.mode"]
    if mode not in ("adapter", "full"):
        raise ConfigError("train.mode", f"expected adapter or full, got {mode!r}")
    task = rc.task(seed=args.task_seed)
    tcfg = rc.train()
    model = build_model(rc, mode, task.num_classes, seed=tcfg.seed)
    result = fit(model, task.generate(), tcfg)
    out = Path(args.out)
    save_checkpoint(state_dict(model), out / "model.ckpt")
    write_csv([m.row() for m in result.metrics], out / "metrics.csv", METRIC_COLUMNS)
    print(f"best dev accuracy {result.best_dev_acc:.4f} at epoch {result.best_epoch}; wrote {out}")
    return 0


def cmd_eval(args, rc: RunConfig) -> int:
    model = load_model(rc, args.checkpoint)
    L = model.config.num_layers
    levels = parse_range(args.sweep_drop.replace("L", str(L)))
    bad = [n for n in levels if not 0 <= n <= L]
    if bad:
        raise ContractError(f"drop levels {bad} outside [0, {L}]")
    data = rc.task(seed=args.task_seed).generate()
    rows = [{"n": n, "accuracy": evaluate(model, data.dev_x, data.dev_y, n)} for n in levels]
    write_csv(rows, args.out, EVAL_COLUMNS)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def cmd_fuse(args, rc: RunConfig) -> int:
    paths = [p for p in args.adapters.split(",") if p]
    if len(paths) < 2:
        raise ContractError("fuse needs at least two adapter checkpoints")
    adapters = [load_adapter_set(rc, p)[0] for p in paths]
    task = rc.task(seed=args.task_seed)
    enc = rc.encoder()
    result = train_fusion(task, adapters, rc.train(), enc, EncoderWeights.initialize(enc),
                          strategy=rc["fusion.strategy"])
    out = Path(args.out)
    save_checkpoint(state_dict(result.model), out / "fusion.ckpt")
    write_csv([m.row() for m in result.metrics], out / "metrics.csv", METRIC_COLUMNS)
    print(f"best dev accuracy {result.best_dev_acc:.4f} at epoch {result.best_epoch}; wrote {out}")
    return 0


def cmd_prune(args, rc: RunConfig) -> int:
    model = load_model(rc, args.checkpoint)
    if not isinstance(model, FusionModel):
        raise ContractError(f"{args.checkpoint} is not a fusion checkpoint")
    data = rc.task(seed=args.task_seed).generate()
    stats = record_activations(model.stack, data.train_x, model.config, model.weights)
    model.stack = prune_fusion(model.stack, stats, args.keep, rc["fusion.prune_mode"])
    out = Path(args.out)
    write_csv(stats.rows(), out / "activations.csv", STATS_COLUMNS)
    save_checkpoint(state_dict(model), out / "pruned.ckpt")
    acc = evaluate(model, data.dev_x, data.dev_y)
    print(f"kept {args.keep} adapters per layer; dev accuracy {acc:.4f}; wrote {out}")
    return 0


def cmd_infer_multi(args, rc: RunConfig) -> int:
    enc = rc.encoder()
    weights = EncoderWeights.initialize(enc)
    bcfg = rc.bench()
    rng = np.random.default_rng(bcfg.seed)
    if args.checkpoints:
        specs = []
        for i, p in enumerate(args.checkpoints.split(",")):
            a, h = load_adapter_set(rc, p)
            specs.append(TaskSpec(f"task{i}", a, h))
    else:
        specs = [TaskSpec(f"task{i}", AdapterSet.initialize(rc.adapter(), enc, rng, up_std=0.02),
                          TaskHead.initialize(enc.hidden, 2, rng, enc.dtype)) for i in range(args.num_tasks)]
    ts = TaskSet(enc, weights, specs)
    rows = []
    for seq_len, batch in bcfg.grid:
        tokens = rng.integers(0, enc.vocab_size, size=(batch, seq_len))

        def sequential_full():
            with T.no_grad():
                for t in specs:
                    classify(encode(tokens, enc, weights), t.head)

        base = time_step(sequential_full, bcfg)
        rows += measure_multitask_speedup(ts, batch, seq_len, bcfg, baseline_full_ms=base, rng=rng)
    out = Path(args.out)
    emit_report(rows, PlotSpec("time_vs_shared_layers", "n_shared", "median_ms", "seq_len",
                               "shared layers", "median inference time (ms)"),
                out, "multitask", MULTI_COLUMNS)
    print(f"wrote {len(rows)} rows to {out}")
    return 0


def cmd_bench(args, rc: RunConfig) -> int:
    enc = rc.encoder()
    bcfg = rc.bench()
    names = [s for s in args.subjects.split(",") if s]
    subjects = [make_subject(n, enc, bcfg.mode, compression_rate=rc["adapter.compression_rate"],
                             seed=bcfg.seed, baseline=args.baseline if args.baseline in names else None)
                for n in names]
    for s in subjects:
        ref = re.sub(r"-drop\d+$", "", s.name)
        if ref != s.name and ref in names:
            s.speedup_ref = ref
    report = bench_suite(subjects, bcfg)
    paths = emit_report(report.rows, BENCH_PLOTS, args.out, "bench", CSV_COLUMNS)
    for p in paths:
        print(p)
    return 0


def cmd_report(args, rc: RunConfig | None) -> int:
    out = Path(args.out)
    for path in args.csv:
        rows = read_csv(path)
        stem = Path(path).stem
        if args.x and args.y:
            specs = [PlotSpec(f"{stem}_{args.y}_vs_{args.x}", args.x, args.y, args.series)]
        elif rows and set(EVAL_COLUMNS) <= set(rows[0]):
            specs = [PlotSpec(f"{stem}_accuracy_vs_n", "n", "accuracy", None,
                              "layers without adapters", "dev accuracy")]
        elif rows and "median_ms" in rows[0]:
            specs = [PlotSpec(f"{stem}_{p.name}", p.x, p.y, p.series, p.x_label, p.y_label, p.title)
                     for p in BENCH_PLOTS if p.x in rows[0]]
        else:
            specs = []
        for p in emit_report(rows, specs, out, stem, list(rows[0]) if rows else None)[1:]:
            print(p)
    return 0


# parser --------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adrp", description="Adapter training, dropping, fusion and benchmarks.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp, task=True):
        sp.add_argument("--config", required=True, help="key = value run configuration")
        if task:
            sp.add_argument("--task-seed", type=int, default=None, help="override task.seed")
        return sp

    sp = with_config(sub.add_parser("train", help="train an adapter or a fully fine-tuned model"))
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_train)

    sp = with_config(sub.add_parser("eval", help="dev accuracy for each drop level"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--sweep-drop", default="0", help="inclusive range a..b (L = num layers) or list")
    sp.add_argument("--out", required=True, help="output CSV")
    sp.set_defaults(func=cmd_eval)

    sp = with_config(sub.add_parser("fuse", help="train fusion over adapter checkpoints"))
    sp.add_argument("--adapters", required=True, help="comma-separated adapter checkpoints")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_fuse)

    sp = with_config(sub.add_parser("prune", help="record activations and keep the top-k adapters"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--keep", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_prune)

    sp = with_config(sub.add_parser("infer-multi", help="shared-trunk multi-task inference timing"), task=False)
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--checkpoints", help="comma-separated adapter checkpoints, one per task")
    g.add_argument("--num-tasks", type=int, default=2, help="random adapters when no checkpoints")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_infer_multi)

    sp = with_config(sub.add_parser("bench", help="time subjects over the configured grid"), task=False)
    sp.add_argument("--subjects", required=True, help="e.g. full,adapter-pfeiffer,fusion-8")
    sp.add_argument("--baseline", default="full", help="subject used for relative speed")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("report", help="render SVG charts from CSV files")
    sp.add_argument("--csv", nargs="+", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--x")
    sp.add_argument("--y")
    sp.add_argument("--series")
    sp.set_defaults(func=cmd_report, config=None)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = RunConfig.load(args.config) if args.config else None
        return args.func(args, rc)
    except ConfigError as e:
        print(f"adrp: config error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"adrp: {e}", file=sys.stderr)
        return 1
    except AdrpError as e:
        print(f"adrp: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
