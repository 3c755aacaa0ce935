"""Session-cached desk-scale experiment runs shared by several test modules."""
import functools

from adrp import experiments

SEEDS = (0, 1, 2)


@functools.cache
def robust_vs_standard(seed):
    return experiments.robust_vs_standard(seed)


@functools.cache
def shared_vs_unshared(seed):
    return experiments.shared_vs_unshared(seed)


@functools.cache
def fusion_pruning(seed):
    return experiments.fusion_pruning(seed)


@functools.cache
def fusion_target_vs_random(seed):
    return experiments.fusion_target_vs_random(seed)
