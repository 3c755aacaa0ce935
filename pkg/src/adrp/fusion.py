"""Attention-based fusion over several task adapters, plus pruning and fusion dropout.

Per active layer, each active adapter i produces ``o_i = adapter_forward(h)``.
A per-position softmax over ``<h Q, o_i K> / sqrt(d)`` weights the values
``o_i V``, and the weighted sum is added back onto ``h``. Inactive adapters
are neither computed nor given any attention mass.

Both paths evaluate this through the adapter deltas ``o_i = h + delta_i``:
the score term ``<h Q, h K>`` is common to every adapter and cancels in the
softmax, and since the weights sum to one the values reduce to
``h V + sum_i alpha_i delta_i V``. The result is the same function, but the
gradients avoid a large common term that otherwise cancels in 32-bit
arithmetic.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .adapters import AdapterSet, adapter_delta
from .encoder import FF, INIT_STD, EncoderConfig, EncoderWeights, Hook, encode
from .errors import ContractError
from .tensor import Tensor

STRATEGIES = ("iterative", "parallel")


@dataclass
class ActivationStats:
    """Mean attention mass per (layer, adapter); NaN rows for layers never fused."""

    mean: np.ndarray
    samples: np.ndarray

    @property
    def num_layers(self) -> int:
        return self.mean.shape[0]

    @property
    def num_adapters(self) -> int:
        return self.mean.shape[1]

    def rows(self) -> list[dict]:
        out = []
        for layer in range(self.num_layers):
            if self.samples[layer] == 0:
                continue
            for i in range(self.num_adapters):
                out.append({"layer": layer, "adapter_id": i,
                            "mean_activation": float(self.mean[layer, i]),
                            "samples": int(self.samples[layer])})
        return out

    @classmethod
    def from_rows(cls, rows, num_layers: int, num_adapters: int) -> "ActivationStats":
        mean = np.full((num_layers, num_adapters), np.nan)
        samples = np.zeros(num_layers, dtype=np.int64)
        for r in rows:
            mean[int(r["layer"]), int(r["adapter_id"])] = float(r["mean_activation"])
            samples[int(r["layer"])] = int(r["samples"])
        return cls(mean, samples)


class _Recorder:
    def __init__(self, num_layers: int, num_adapters: int):
        self.sums = np.zeros((num_layers, num_adapters))
        self.samples = np.zeros(num_layers, dtype=np.int64)

    def add(self, layer: int, active_idx: np.ndarray, alpha: np.ndarray) -> None:
        flat = alpha.reshape(-1, alpha.shape[-1]).astype(np.float64)
        self.sums[layer, active_idx] += flat.sum(axis=0)
        self.samples[layer] += flat.shape[0]

    def stats(self) -> ActivationStats:
        with np.errstate(invalid="ignore", divide="ignore"):
            mean = self.sums / self.samples[:, None]
        mean[self.samples == 0] = np.nan
        return ActivationStats(mean, self.samples.copy())


@dataclass
class FusionStack:
    adapters: list[AdapterSet]
    query: list[Tensor]
    key: list[Tensor]
    value: list[Tensor]
    active_layers: np.ndarray
    active_adapters: np.ndarray
    strategy: str = "iterative"
    recorder: _Recorder | None = field(default=None, repr=False)

    @classmethod
    def initialize(cls, adapters: list[AdapterSet], encoder_config: EncoderConfig,
                   rng: np.random.Generator, value_noise: float = 1e-3,
                   strategy: str = "iterative") -> "FusionStack":
        if len(adapters) < 1:
            raise ContractError("fusion needs at least one adapter")
        for a in adapters:
            if a.config.architecture != "pfeiffer":
                raise ContractError("fusion is implemented over pfeiffer adapters only")
        ms = {a.config.bottleneck(encoder_config.hidden) for a in adapters}
        if len(ms) != 1:
            raise ContractError(f"all fused adapters must share one bottleneck size, got {sorted(ms)}")
        L, d, dt = encoder_config.num_layers, encoder_config.hidden, encoder_config.dtype
        q, k, v = [], [], []
        for _ in range(L):
            q.append(T.parameter(rng.normal(0, INIT_STD, (d, d)).astype(dt)))
            k.append(T.parameter(rng.normal(0, INIT_STD, (d, d)).astype(dt)))
            v.append(T.parameter((np.eye(d) + rng.normal(0, value_noise, (d, d))).astype(dt)))
        n = len(adapters)
        return cls(adapters, q, k, v, np.ones(L, dtype=bool), np.ones((L, n), dtype=bool), strategy)

    @property
    def num_adapters(self) -> int:
        return len(self.adapters)

    @property
    def num_layers(self) -> int:
        return len(self.query)

    def copy(self) -> "FusionStack":
        """Shallow copy: parameters shared, masks copied."""
        out = copy.copy(self)
        out.active_layers = self.active_layers.copy()
        out.active_adapters = self.active_adapters.copy()
        out.recorder = None
        return out

    def block(self, adapter: int, layer: int):
        return self.adapters[adapter].blocks[(layer, FF)]

    def parameters(self) -> list[Tensor]:
        return [*self.query, *self.key, *self.value]

    def adapter_parameters(self) -> list[Tensor]:
        return [t for a in self.adapters for t in a.parameters()]

    def named_tensors(self, prefix: str = "fusion") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for layer in range(self.num_layers):
            out[f"{prefix}/{layer}/query"] = self.query[layer]
            out[f"{prefix}/{layer}/key"] = self.key[layer]
            out[f"{prefix}/{layer}/value"] = self.value[layer]
        for i, a in enumerate(self.adapters):
            out.update(a.named_tensors(f"{prefix}/adapter/{i}"))
        out[f"{prefix}/active_layers"] = Tensor(self.active_layers.astype(np.float32))
        out[f"{prefix}/active_adapters"] = Tensor(self.active_adapters.astype(np.float32))
        return out

    def hooks(self, masks: dict[int, np.ndarray] | None = None) -> list[Hook]:
        """One fusion hook per active layer; ``masks`` optionally narrows the adapter set per layer."""
        fwd = fusion_forward_parallel if self.strategy == "parallel" else fusion_forward_iterative
        out = []
        for layer in range(self.num_layers):
            if not self.active_layers[layer]:
                continue
            mask = None if masks is None else masks.get(layer)
            out.append(Hook(layer, FF, (lambda h, l=layer, m=mask: fwd(h, self, l, m)), kind="fusion"))
        return out


def _active(stack: FusionStack, layer: int, mask: np.ndarray | None) -> np.ndarray:
    if not 0 <= layer < stack.num_layers:
        raise ContractError(f"layer {layer} outside [0, {stack.num_layers})")
    if not stack.active_layers[layer]:
        raise ContractError(f"fusion layer {layer} is inactive")
    act = stack.active_adapters[layer].copy()
    if mask is not None:
        act &= np.asarray(mask, dtype=bool)
    idx = np.flatnonzero(act)
    if idx.size == 0:
        raise ContractError(f"no active adapters at fusion layer {layer}")
    return idx


def fusion_forward_iterative(h: Tensor, stack: FusionStack, layer: int,
                             mask: np.ndarray | None = None) -> Tensor:
    """Run the active adapters one after another and attend over their outputs."""
    idx = _active(stack, layer, mask)
    d = h.shape[-1]
    q = h @ stack.query[layer]
    scores, values = [], []
    for i in idx:
        delta = adapter_delta(h, stack.block(int(i), layer))
        k = delta @ stack.key[layer]
        scores.append(T.sum_(q * k, axis=-1, keepdims=True))
        values.append(delta @ stack.value[layer])
    scores_t = T.mul(T.concat(scores, axis=-1), 1.0 / math.sqrt(d))
    alpha = T.softmax(scores_t, axis=-1)
    if stack.recorder is not None:
        stack.recorder.add(layer, idx, alpha.data)
    out = h + h @ stack.value[layer]
    for j, v in enumerate(values):
        out = out + T.index(alpha, (..., slice(j, j + 1))) * v
    return out


def fusion_forward_parallel(h: Tensor, stack: FusionStack, layer: int,
                            mask: np.ndarray | None = None) -> Tensor:
    """Same result as the iterative path, with all active adapters batched.

    Down projections (with each adapter's LN affine folded in) form one wide
    ``d -> N*m`` projection; up projections run as a grouped (block-diagonal)
    batched product.
    """
    idx = _active(stack, layer, mask)
    n = idx.size
    blocks = [stack.block(int(i), layer) for i in idx]
    shape = h.shape
    d = shape[-1]
    m = blocks[0].bottleneck
    B = int(np.prod(shape[:-1]))

    w_wide = T.concat([T.reshape(b.ln_gain, (d, 1)) * b.down for b in blocks], axis=1)
    b_wide = T.concat([b.ln_bias @ b.down for b in blocks], axis=0)
    up = T.stack([b.up for b in blocks], axis=0)  # (n, m, d)

    hf = T.reshape(h, (B, d))
    xhat = T.layer_norm(hf, None, None)
    z = T.relu(xhat @ w_wide + b_wide)  # (B, n*m)
    z = T.transpose(T.reshape(z, (B, n, m)), (1, 0, 2))  # (n, B, m)
    delta = z @ up  # (n, B, d)
    k = delta @ stack.key[layer]
    v = delta @ stack.value[layer]
    q = hf @ stack.query[layer]  # (B, d)
    scores = T.mul(T.sum_(k * q, axis=-1), 1.0 / math.sqrt(d))  # (n, B)
    alpha = T.softmax(T.transpose(scores, (1, 0)), axis=-1)  # (B, n)
    if stack.recorder is not None:
        stack.recorder.add(layer, idx, alpha.data)
    weighted = T.sum_(T.reshape(T.transpose(alpha, (1, 0)), (n, B, 1)) * v, axis=0)
    return T.reshape(hf + hf @ stack.value[layer] + weighted, shape)


def record_activations(stack: FusionStack, tokens: np.ndarray, encoder_config: EncoderConfig,
                       weights: EncoderWeights, batch_size: int = 256,
                       attention_mask: np.ndarray | None = None) -> ActivationStats:
    """Replay ``tokens`` through the fused encoder and average the softmax weights.

    The mean runs over every position of every example, per layer and adapter.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or len(tokens) == 0:
        raise ContractError("record_activations needs a non-empty (examples, seq) token array")
    prev = stack.recorder
    stack.recorder = _Recorder(stack.num_layers, stack.num_adapters)
    try:
        with T.no_grad():
            for i in range(0, len(tokens), batch_size):
                m = None if attention_mask is None else attention_mask[i:i + batch_size]
                encode(tokens[i:i + batch_size], encoder_config, weights, stack.hooks(), attention_mask=m)
        return stack.recorder.stats()
    finally:
        stack.recorder = prev


# pruning / layer removal / dropout ----------------------------------------------------------

def prune_fusion(stack: FusionStack, stats: ActivationStats, keep_k: int,
                 mode: str = "per_layer") -> FusionStack:
    """Keep the ``keep_k`` adapters with the highest mean activation; lower index wins ties."""
    n = stack.num_adapters
    if not 1 <= keep_k <= n:
        raise ContractError(f"keep_k must be in [1, {n}], got {keep_k}")
    if stats.mean.shape != (stack.num_layers, n):
        raise ContractError("activation stats do not match the fusion stack shape")
    if mode not in ("per_layer", "global"):
        raise ContractError(f"unknown prune mode {mode!r}")
    out = stack.copy()

    def top(scores: np.ndarray, allowed: np.ndarray) -> np.ndarray:
        s = np.where(allowed & np.isfinite(scores), scores, -np.inf)
        order = np.argsort(-s, kind="stable")
        keep = np.zeros(n, dtype=bool)
        keep[[i for i in order if allowed[i]][:keep_k]] = True
        return keep

    if mode == "global":
        fused = np.flatnonzero(stats.samples > 0)
        if fused.size == 0:
            return out
        ranking = np.nanmean(stats.mean[fused], axis=0)
        for layer in range(stack.num_layers):
            allowed = stack.active_adapters[layer]
            if allowed.sum() > keep_k:
                out.active_adapters[layer] = top(ranking, allowed)
        return out

    for layer in range(stack.num_layers):
        allowed = stack.active_adapters[layer]
        if stats.samples[layer] == 0 or allowed.sum() <= keep_k:
            continue
        out.active_adapters[layer] = top(stats.mean[layer], allowed)
    return out


def remove_fusion_layers(stack: FusionStack, n: int) -> FusionStack:
    if not 0 <= n <= stack.num_layers:
        raise ContractError(f"n must be in [0, {stack.num_layers}], got {n}")
    out = stack.copy()
    out.active_layers[:n] = False
    return out


def fusion_dropout_mask(stack: FusionStack, rate: float, rng: np.random.Generator,
                        layer: int) -> np.ndarray:
    """Drop each adapter active at ``layer`` with probability ``rate``.

    Resamples until at least one adapter survives.
    """
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"fusion dropout rate must be in [0, 1), got {rate}")
    allowed = stack.active_adapters[layer]
    if rate == 0.0:
        return allowed.copy()
    idx = np.flatnonzero(allowed)
    while True:
        survive = rng.random(idx.size) >= rate
        if survive.any():
            keep = np.zeros(stack.num_adapters, dtype=bool)
            keep[idx[survive]] = True
            return keep


def layer_dropout_masks(stack: FusionStack, rate: float,
                        rng: np.random.Generator) -> dict[int, np.ndarray] | None:
    """Independent fusion-dropout masks for every active layer of one batch."""
    if rate == 0.0:
        return None
    return {layer: fusion_dropout_mask(stack, rate, rng, layer)
            for layer in range(stack.num_layers) if stack.active_layers[layer]}
