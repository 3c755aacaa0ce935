"""Desk-scale experiments behind the accuracy-level acceptance checks.

Each function trains small models on a synthetic task and returns plain
dicts, so tests and ad-hoc scripts share one code path.
"""
from __future__ import annotations

import numpy as np

from .adapters import AdapterConfig, AdapterSet, DropPolicy
from .encoder import EncoderConfig, EncoderWeights
from .fusion import prune_fusion, record_activations
from .tasks import SyntheticTask
from .trainer import TrainConfig, evaluate, train_adapter, train_fusion

# learning rate for desk-scale runs on a randomly initialised (not pretrained) base
DESK_LR = 1e-2


def desk_encoder(num_layers: int = 12, hidden: int = 64, seed: int = 0) -> EncoderConfig:
    return EncoderConfig(num_layers=num_layers, hidden=hidden, heads=4, ff_dim=4 * hidden,
                         max_seq=64, vocab_size=32, seed=seed)


def majority_task(seed: int, train_size: int = 2000, dev_size: int = 500) -> SyntheticTask:
    return SyntheticTask("majority", "majority-token-class", seed=seed, vocab_size=32, seq_len=16,
                         num_classes=2, train_size=train_size, dev_size=dev_size)


def robust_vs_standard(seed: int, epochs: int = 20, num_layers: int = 12) -> dict:
    """Dev accuracy at every drop level for a standard and a robust-trained adapter."""
    enc = desk_encoder(num_layers)
    task = majority_task(seed)
    data = task.generate()
    out = {}
    for name, policy in (("standard", DropPolicy.none()), ("robust", DropPolicy.robust(0, num_layers - 1))):
        cfg = TrainConfig(lr=DESK_LR, epochs=epochs, seed=seed, drop_policy=policy)
        res = train_adapter(task, cfg, enc, AdapterConfig("pfeiffer", 16.0))
        out[name] = [evaluate(res.model, data.dev_x, data.dev_y, n) for n in range(num_layers + 1)]
    return out


def shared_vs_unshared(seed: int, epochs: int = 20, num_layers: int = 12) -> dict:
    """Best dev accuracy and parameter count of shared and per-layer adapters at c=16."""
    enc = desk_encoder(num_layers)
    task = majority_task(seed)
    out = {}
    for name, shared in (("unshared", False), ("shared", True)):
        cfg = TrainConfig(lr=DESK_LR, epochs=epochs, seed=seed)
        res = train_adapter(task, cfg, enc, AdapterConfig("pfeiffer", 16.0, shared_across_layers=shared))
        out[name] = {"acc": res.best_dev_acc, "params": res.model.adapters.num_parameters()}
    return out


def fusion_pruning(seed: int, num_random: int = 7, keep_k: int = 2, num_layers: int = 6,
                   adapter_epochs: int = 10, fusion_epochs: int = 5) -> dict:
    """Fuse one trained target adapter with random ones, then prune to ``keep_k``.

    The target sits at a seed-dependent index so tie-breaking cannot favour it.
    Pruning runs in both modes; for each, the result holds the keep masks,
    dev accuracy, and the number of fused layers where the target was kept.
    """
    enc = desk_encoder(num_layers)
    weights = EncoderWeights.initialize(enc)
    task = majority_task(seed)
    data = task.generate()
    acfg = AdapterConfig("pfeiffer", 16.0)
    target = train_adapter(task, TrainConfig(lr=DESK_LR, epochs=adapter_epochs, seed=seed),
                           enc, acfg, weights).model.adapters
    rng = np.random.default_rng(1000 + seed)
    pool = [AdapterSet.initialize(acfg, enc, rng, up_std=0.02) for _ in range(num_random)]
    target_idx = int(rng.integers(num_random + 1))
    pool.insert(target_idx, target)
    res = train_fusion(task, pool, TrainConfig(lr=DESK_LR, epochs=fusion_epochs, seed=seed), enc, weights)
    model = res.model
    full_acc = evaluate(model, data.dev_x, data.dev_y)
    stats = record_activations(model.stack, data.train_x, enc, weights)
    fused = model.stack.active_layers
    stack = model.stack
    out = {"target_idx": target_idx, "mean_activation": stats.mean, "full_acc": full_acc}
    for mode in ("global", "per_layer"):
        model.stack = prune_fusion(stack, stats, keep_k, mode)
        keep = model.stack.active_adapters.copy()
        out[mode] = {"keep": keep, "acc": evaluate(model, data.dev_x, data.dev_y),
                     "layers_kept": int(keep[fused, target_idx].sum()), "layers": int(fused.sum()),
                     "survived": bool(keep[fused, target_idx].all())}
    model.stack = stack
    return out


def fusion_target_vs_random(seed: int, num_layers: int = 6, adapter_epochs: int = 10,
                            fusion_epochs: int = 20, dropout_rates=(0.0, 0.75)) -> dict:
    """Fuse a trained target adapter with one random adapter at each fusion dropout rate.

    Returns, per rate, the mean activation table (layers x 2, target first) and dev accuracy.
    """
    enc = desk_encoder(num_layers)
    weights = EncoderWeights.initialize(enc)
    task = majority_task(seed)
    data = task.generate()
    acfg = AdapterConfig("pfeiffer", 16.0)
    target = train_adapter(task, TrainConfig(lr=DESK_LR, epochs=adapter_epochs, seed=seed),
                           enc, acfg, weights).model.adapters
    rand = AdapterSet.initialize(acfg, enc, np.random.default_rng(1000 + seed), up_std=0.02)
    out = {}
    for rate in dropout_rates:
        cfg = TrainConfig(lr=DESK_LR, epochs=fusion_epochs, seed=seed, fusion_dropout_rate=rate)
        res = train_fusion(task, [target, rand], cfg, enc, weights)
        stats = record_activations(res.model.stack, data.train_x, enc, weights)
        out[rate] = {"mean_activation": stats.mean, "acc": res.best_dev_acc}
    return out
