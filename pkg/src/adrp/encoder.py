"""BERT-shaped post-LN transformer encoder with adapter/fusion hook points."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor

# sublayer positions where hooks may attach
ATTN = "attn"
FF = "ff"
HOOK_POINTS = (ATTN, FF)

INIT_STD = 0.02


@dataclass
class EncoderConfig:
    num_layers: int = 12
    hidden: int = 64
    heads: int = 4
    ff_dim: int = 256
    max_seq: int = 128
    vocab_size: int = 64
    activation: str = "gelu"
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("num_layers", "hidden", "heads", "ff_dim", "max_seq", "vocab_size"):
            if int(getattr(self, name)) < 1:
                raise ContractError(f"EncoderConfig.{name} must be >= 1")
        if self.hidden % self.heads:
            raise ContractError(f"hidden ({self.hidden}) must be divisible by heads ({self.heads})")
        if self.activation != "gelu":
            raise ContractError(f"unsupported activation {self.activation!r}")
        if self.dtype not in ("float32", "float64"):
            raise ContractError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @classmethod
    def bert_base(cls, **overrides) -> "EncoderConfig":
        kw = dict(num_layers=12, hidden=768, heads=12, ff_dim=3072, max_seq=512, vocab_size=30522)
        kw.update(overrides)
        return cls(**kw)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads


@dataclass
class LayerWeights:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    w1: Tensor
    w2: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor

    def tensors(self) -> dict[str, Tensor]:
        return dict(vars(self))


@dataclass
class EncoderWeights:
    tok_emb: Tensor
    pos_emb: Tensor
    emb_ln_gain: Tensor
    emb_ln_bias: Tensor
    layers: list[LayerWeights] = field(default_factory=list)

    @classmethod
    def initialize(cls, config: EncoderConfig, seed: int | None = None) -> "EncoderWeights":
        """Seeded N(0, 0.02^2) projections/embeddings, unit LN gains, zero LN biases."""
        rng = np.random.default_rng(config.seed if seed is None else seed)
        dt = config.np_dtype
        d, f = config.hidden, config.ff_dim

        def normal(*shape):
            return Tensor(rng.normal(0.0, INIT_STD, size=shape).astype(dt))

        def const(v, n):
            return Tensor(np.full(n, v, dtype=dt))

        tok = normal(config.vocab_size, d)
        pos = normal(config.max_seq, d)
        layers = [
            LayerWeights(
                wq=normal(d, d), wk=normal(d, d), wv=normal(d, d), wo=normal(d, d),
                w1=normal(d, f), w2=normal(f, d),
                ln1_gain=const(1.0, d), ln1_bias=const(0.0, d),
                ln2_gain=const(1.0, d), ln2_bias=const(0.0, d),
            )
            for _ in range(config.num_layers)
        ]
        return cls(tok, pos, const(1.0, d), const(0.0, d), layers)

    def named_tensors(self) -> dict[str, Tensor]:
        out = {
            "encoder/tok_emb": self.tok_emb,
            "encoder/pos_emb": self.pos_emb,
            "encoder/emb_ln_gain": self.emb_ln_gain,
            "encoder/emb_ln_bias": self.emb_ln_bias,
        }
        for i, lw in enumerate(self.layers):
            for k, t in lw.tensors().items():
                out[f"encoder/{i}/{k}"] = t
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_tensors().values())

    def set_trainable(self, flag: bool) -> None:
        for t in self.parameters():
            t.requires_grad = flag
            if not flag:
                t.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.named_tensors().items()}

    def load(self, arrays: dict[str, np.ndarray]) -> None:
        for k, t in self.named_tensors().items():
            if k in arrays:
                t.data = np.array(arrays[k], dtype=t.dtype)


@dataclass
class TaskHead:
    weight: Tensor
    bias: Tensor
    pooling: str = "first-token"

    @classmethod
    def initialize(cls, hidden: int, num_classes: int, rng: np.random.Generator, dtype="float32") -> "TaskHead":
        if num_classes < 2:
            raise ContractError("a task head needs at least 2 classes")
        w = rng.normal(0.0, INIT_STD, size=(hidden, num_classes)).astype(dtype)
        return cls(T.parameter(w), T.parameter(np.zeros(num_classes, dtype=dtype)))

    @property
    def num_classes(self) -> int:
        return self.bias.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def named_tensors(self, prefix: str = "head") -> dict[str, Tensor]:
        return {f"{prefix}/weight": self.weight, f"{prefix}/bias": self.bias}


@dataclass(frozen=True)
class Hook:
    """A transform applied to a sublayer output before the residual add + LN."""

    layer: int
    point: str
    fn: Callable[[Tensor], Tensor]
    kind: str = "adapter"

    def __call__(self, h: Tensor) -> Tensor:
        return self.fn(h)


# forward ------------------------------------------------------------------------

def embed(tokens: np.ndarray, config: EncoderConfig, weights: EncoderWeights) -> Tensor:
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ContractError(f"tokens must be [batch, seq], got shape {tokens.shape}")
    if tokens.shape[1] > config.max_seq:
        raise ContractError(f"sequence length {tokens.shape[1]} exceeds max_seq {config.max_seq}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise ContractError(f"token ids must lie in [0, {config.vocab_size})")
    tok = T.embedding(weights.tok_emb, tokens)
    pos = T.index(weights.pos_emb, slice(0, tokens.shape[1]))
    return T.layer_norm(tok + pos, weights.emb_ln_gain, weights.emb_ln_bias)


def _attention(h: Tensor, lw: LayerWeights, config: EncoderConfig, mask: np.ndarray | None) -> Tensor:
    b, s, d = h.shape
    nh, hd = config.heads, config.head_dim

    def split(x):
        return T.transpose(T.reshape(x, (b, s, nh, hd)), (0, 2, 1, 3))

    q = split(h @ lw.wq)
    k = split(h @ lw.wk)
    v = split(h @ lw.wv)
    scores = T.mul(q @ T.swapaxes(k, -1, -2), 1.0 / math.sqrt(hd))
    if mask is not None:
        keep = np.asarray(mask, dtype=bool)[:, None, None, :]
        probs = T.softmax_masked(scores, np.broadcast_to(keep, scores.shape))
    else:
        probs = T.softmax(scores, axis=-1)
    ctx = T.reshape(T.transpose(probs @ v, (0, 2, 1, 3)), (b, s, d))
    return ctx @ lw.wo


def _split_hooks(hooks: Sequence[Hook] | None, layer_idx: int, kind: str) -> dict[str, Hook]:
    out: dict[str, Hook] = {}
    for hk in hooks or ():
        if hk.layer != layer_idx:
            raise ContractError(f"{kind} hook for layer {hk.layer} passed to layer {layer_idx}")
        if hk.point not in HOOK_POINTS:
            raise ContractError(f"unknown hook point {hk.point!r}")
        if hk.point in out:
            raise ContractError(f"two {kind} hooks at layer {layer_idx} point {hk.point}")
        out[hk.point] = hk
    return out


def transformer_layer(
    h: Tensor,
    layer_idx: int,
    config: EncoderConfig,
    weights: EncoderWeights,
    adapter_hook: Sequence[Hook] | None = None,
    fusion_hook: Sequence[Hook] | None = None,
    attention_mask: np.ndarray | None = None,
) -> Tensor:
    """Self-attention sublayer then FF sublayer, each followed by residual + LN.

    Hooks transform the sublayer output before the residual add.
    """
    if h.shape[-1] != config.hidden:
        raise DimensionError(f"hidden size {h.shape[-1]} != config.hidden {config.hidden}")
    adapters = _split_hooks(adapter_hook, layer_idx, "adapter")
    fusions = _split_hooks(fusion_hook, layer_idx, "fusion")
    clash = set(adapters) & set(fusions)
    if clash:
        raise ContractError(f"adapter and fusion hooks both active at layer {layer_idx} point {sorted(clash)}")
    hooks = {**adapters, **fusions}
    lw = weights.layers[layer_idx]

    a = _attention(h, lw, config, attention_mask)
    if ATTN in hooks:
        a = hooks[ATTN](a)
    h1 = T.layer_norm(h + a, lw.ln1_gain, lw.ln1_bias)

    f = T.gelu(h1 @ lw.w1) @ lw.w2
    if FF in hooks:
        f = hooks[FF](f)
    return T.layer_norm(h1 + f, lw.ln2_gain, lw.ln2_bias)


def group_hooks(hooks: Iterable[Hook] | None) -> dict[int, tuple[list[Hook], list[Hook]]]:
    """Index a flat hook list by layer into (adapter hooks, fusion hooks)."""
    by_layer: dict[int, tuple[list[Hook], list[Hook]]] = {}
    for hk in hooks or ():
        slot = by_layer.setdefault(hk.layer, ([], []))
        (slot[1] if hk.kind == "fusion" else slot[0]).append(hk)
    return by_layer


def run_layers(
    h: Tensor,
    config: EncoderConfig,
    weights: EncoderWeights,
    hooks: Iterable[Hook] | None,
    start: int,
    stop: int,
    drop_n: int = 0,
    attention_mask: np.ndarray | None = None,
    dropped_layers: Iterable[int] | None = None,
    collect: list | None = None,
) -> Tensor:
    by_layer = group_hooks(hooks)
    skip = set(dropped_layers or ())
    for i in range(start, stop):
        if i < drop_n or i in skip:
            ah, fh = None, None
        else:
            ah, fh = by_layer.get(i, (None, None))
        h = transformer_layer(h, i, config, weights, ah, fh, attention_mask)
        if collect is not None:
            collect.append(h)
    return h


def encode(
    tokens: np.ndarray,
    config: EncoderConfig,
    weights: EncoderWeights,
    hooks: Iterable[Hook] | None = None,
    drop_n: int = 0,
    attention_mask: np.ndarray | None = None,
    dropped_layers: Iterable[int] | None = None,
    collect: list | None = None,
) -> Tensor:
    """Embeddings followed by all layers; layers below ``drop_n`` run without hooks.

    ``collect``, if given, receives every layer's output in order.
    """
    if not 0 <= drop_n <= config.num_layers:
        raise ContractError(f"drop_n must be in [0, {config.num_layers}], got {drop_n}")
    h = embed(tokens, config, weights)
    return run_layers(h, config, weights, hooks, 0, config.num_layers, drop_n,
                      attention_mask, dropped_layers, collect)


def classify(h: Tensor, head: TaskHead) -> Tensor:
    if h.shape[-1] != head.weight.shape[0]:
        raise DimensionError(f"head expects hidden {head.weight.shape[0]}, got {h.shape[-1]}")
    pooled = T.index(h, (slice(None), 0))
    return pooled @ head.weight + head.bias
