"""Bottleneck adapters (Houlsby / Pfeiffer placement), cross-layer sharing and drop policies."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .encoder import ATTN, FF, INIT_STD, EncoderConfig, Hook
from .errors import ContractError, DimensionError
from .tensor import Tensor

ARCHITECTURES = ("houlsby", "pfeiffer")


@dataclass
class AdapterConfig:
    architecture: str = "pfeiffer"
    compression_rate: float = 16.0
    shared_across_layers: bool = False
    nonlinearity: str = "relu"

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ContractError(f"architecture must be one of {ARCHITECTURES}, got {self.architecture!r}")
        if not self.compression_rate > 0:
            raise ContractError("compression_rate must be positive")
        if self.nonlinearity != "relu":
            raise ContractError(f"unsupported nonlinearity {self.nonlinearity!r}")

    def bottleneck(self, hidden: int) -> int:
        return max(1, int(round(hidden / self.compression_rate)))


def attach_points(arch: str) -> list[str]:
    """Sublayer positions an architecture attaches to, in forward order."""
    if arch == "houlsby":
        return [ATTN, FF]
    if arch == "pfeiffer":
        return [FF]
    raise ContractError(f"unknown adapter architecture {arch!r}")


@dataclass
class AdapterParams:
    """One bottleneck block: pre-LN, down projection, ReLU, up projection, residual."""

    down: Tensor
    up: Tensor
    ln_gain: Tensor
    ln_bias: Tensor

    @classmethod
    def initialize(cls, hidden: int, bottleneck: int, rng: np.random.Generator,
                   dtype="float32", up_std: float = 0.0) -> "AdapterParams":
        down = rng.normal(0.0, INIT_STD, size=(hidden, bottleneck)).astype(dtype)
        if up_std:
            up = rng.normal(0.0, up_std, size=(bottleneck, hidden)).astype(dtype)
        else:
            up = np.zeros((bottleneck, hidden), dtype=dtype)
        return cls(
            T.parameter(down),
            T.parameter(up),
            T.parameter(np.ones(hidden, dtype=dtype)),
            T.parameter(np.zeros(hidden, dtype=dtype)),
        )

    @property
    def hidden(self) -> int:
        return self.down.shape[0]

    @property
    def bottleneck(self) -> int:
        return self.down.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.down, self.up, self.ln_gain, self.ln_bias]

    def named_tensors(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}/{k}": t for k, t in
                zip(("down", "up", "ln_gain", "ln_bias"), self.parameters())}

    def num_parameters(self, include_layer_norm: bool = True) -> int:
        n = self.down.size + self.up.size
        if include_layer_norm:
            n += self.ln_gain.size + self.ln_bias.size
        return n


def adapter_delta(h: Tensor, params: AdapterParams, use_layer_norm: bool = True) -> Tensor:
    """The bottleneck branch ``up(relu(down(LN(h))))`` without the residual."""
    if h.shape[-1] != params.hidden:
        raise DimensionError(f"adapter expects hidden {params.hidden}, got {h.shape[-1]}")
    x = T.layer_norm(h, params.ln_gain, params.ln_bias) if use_layer_norm else h
    return T.relu(x @ params.down) @ params.up


def adapter_forward(h: Tensor, params: AdapterParams, use_layer_norm: bool = True) -> Tensor:
    """``h + up(relu(down(LN(h))))``; ``use_layer_norm=False`` skips the pre-LN."""
    return h + adapter_delta(h, params, use_layer_norm)


@dataclass
class AdapterSet:
    """All adapter blocks for one task, keyed by (layer, attach point).

    With cross-layer sharing every layer maps to the same block object, so
    gradients from all layers accumulate into one parameter set.
    """

    config: AdapterConfig
    num_layers: int
    blocks: dict = field(default_factory=dict)

    @classmethod
    def initialize(cls, config: AdapterConfig, encoder_config: EncoderConfig,
                   rng: np.random.Generator, up_std: float = 0.0) -> "AdapterSet":
        d = encoder_config.hidden
        m = config.bottleneck(d)
        dt = encoder_config.dtype
        points = attach_points(config.architecture)
        blocks = {}
        if config.shared_across_layers:
            shared = {p: AdapterParams.initialize(d, m, rng, dt, up_std) for p in points}
            blocks = shared_adapter_view(shared, encoder_config.num_layers)
        else:
            for layer in range(encoder_config.num_layers):
                for p in points:
                    blocks[(layer, p)] = AdapterParams.initialize(d, m, rng, dt, up_std)
        return cls(config, encoder_config.num_layers, blocks)

    def hooks(self, use_layer_norm: bool = True) -> list[Hook]:
        return [
            Hook(layer, point, (lambda h, p=params: adapter_forward(h, p, use_layer_norm)))
            for (layer, point), params in sorted(self.blocks.items())
        ]

    def unique_blocks(self) -> Iterator[tuple[str, AdapterParams]]:
        seen: set[int] = set()
        for (layer, point), params in sorted(self.blocks.items()):
            if id(params) in seen:
                continue
            seen.add(id(params))
            key = f"shared/{point}" if self.config.shared_across_layers else f"{layer}/{point}"
            yield key, params

    def parameters(self) -> list[Tensor]:
        return [t for _, b in self.unique_blocks() for t in b.parameters()]

    def named_tensors(self, prefix: str = "adapter") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, b in self.unique_blocks():
            out.update(b.named_tensors(f"{prefix}/{key}"))
        return out

    def num_parameters(self, include_layer_norm: bool = True) -> int:
        return sum(b.num_parameters(include_layer_norm) for _, b in self.unique_blocks())

    def freeze(self, flag: bool = True) -> None:
        for t in self.parameters():
            t.requires_grad = not flag
            if flag:
                t.grad = None


def shared_adapter_view(params: dict[str, AdapterParams] | AdapterParams, num_layers: int) -> dict:
    """Map every layer's attach point(s) onto the same underlying block(s)."""
    if isinstance(params, AdapterParams):
        params = {FF: params}
    return {(layer, point): p for layer in range(num_layers) for point, p in params.items()}


def count_params(config: AdapterConfig, encoder_config: EncoderConfig,
                 include_layer_norm: bool = True) -> int:
    """Trainable adapter parameters, heads excluded.

    Per block: ``2*d*m`` projection weights plus ``2*d`` adapter LN parameters
    (``include_layer_norm=False`` drops the LN term; that variant gives
    884,736 for 12-layer d=768 Pfeiffer adapters at compression 16).
    """
    d = encoder_config.hidden
    m = config.bottleneck(d)
    per_block = 2 * d * m + (2 * d if include_layer_norm else 0)
    blocks = len(attach_points(config.architecture))
    layers = 1 if config.shared_across_layers else encoder_config.num_layers
    return per_block * blocks * layers


# drop policies -------------------------------------------------------------------

@dataclass(frozen=True)
class DropPolicy:
    """How many lower layers lose their adapters for a batch.

    ``random`` (each layer independently dropped with probability ``rate``)
    is offered for comparison only and is not a prefix policy.
    """

    kind: str = "none"
    n: int = 0
    lo: int = 0
    hi: int = 0
    rate: float = 0.0

    @classmethod
    def none(cls) -> "DropPolicy":
        return cls("none")

    @classmethod
    def specialized(cls, n: int) -> "DropPolicy":
        return cls("specialized", n=n)

    @classmethod
    def robust(cls, lo: int = 0, hi: int = 11) -> "DropPolicy":
        return cls("robust", lo=lo, hi=hi)

    @classmethod
    def random_layers(cls, rate: float) -> "DropPolicy":
        return cls("random", rate=rate)

    def validate(self, num_layers: int) -> None:
        if self.kind == "none":
            return
        if self.kind == "specialized":
            if not 0 <= self.n <= num_layers:
                raise ContractError(f"specialized n={self.n} outside [0, {num_layers}]")
        elif self.kind == "robust":
            if not 0 <= self.lo <= self.hi <= num_layers - 1:
                raise ContractError(f"robust range [{self.lo}, {self.hi}] outside [0, {num_layers - 1}]")
        elif self.kind == "random":
            if not 0.0 <= self.rate < 1.0:
                raise ContractError(f"random drop rate {self.rate} outside [0, 1)")
        else:
            raise ContractError(f"unknown drop policy kind {self.kind!r}")


def sample_drop(policy: DropPolicy, rng: np.random.Generator) -> int:
    """Number of lower layers whose adapters are removed for one batch."""
    if policy.kind == "none":
        return 0
    if policy.kind == "specialized":
        return policy.n
    if policy.kind == "robust":
        return int(rng.integers(policy.lo, policy.hi + 1))
    raise ContractError(f"policy {policy.kind!r} does not drop a layer prefix")


def sample_dropped_layers(policy: DropPolicy, rng: np.random.Generator, num_layers: int) -> tuple[int, frozenset]:
    """Return ``(drop_n, extra_dropped_layers)`` for any policy kind."""
    if policy.kind == "random":
        mask = rng.random(num_layers) < policy.rate
        return 0, frozenset(int(i) for i in np.flatnonzero(mask))
    return sample_drop(policy, rng), frozenset()
