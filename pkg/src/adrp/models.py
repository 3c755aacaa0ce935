"""Encoder + task modules + head, bundled behind one forward signature."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .adapters import AdapterConfig, AdapterSet
from .encoder import EncoderConfig, EncoderWeights, Hook, TaskHead, classify, encode
from .errors import ContractError
from .fusion import FusionStack
from .tensor import Tensor


@dataclass
class Model:
    config: EncoderConfig
    weights: EncoderWeights
    head: TaskHead

    def hooks(self, fusion_masks: dict | None = None) -> list[Hook]:
        return []

    def forward(self, tokens: np.ndarray, drop_n: int = 0, attention_mask: np.ndarray | None = None,
                dropped_layers: Iterable[int] | None = None, fusion_masks: dict | None = None,
                collect: list | None = None) -> Tensor:
        h = encode(tokens, self.config, self.weights, self.hooks(fusion_masks), drop_n,
                   attention_mask, dropped_layers, collect)
        return classify(h, self.head)

    def trainable(self) -> list[Tensor]:
        return [t for t in self.all_parameters() if t.requires_grad]

    def all_parameters(self) -> list[Tensor]:
        return self.weights.parameters() + self.head.parameters()

    def named_tensors(self) -> dict[str, Tensor]:
        return dict(self.head.named_tensors())


@dataclass
class FullModel(Model):
    """Full fine-tuning: every encoder weight is trainable."""

    def __post_init__(self):
        self.weights.set_trainable(True)

    def named_tensors(self) -> dict[str, Tensor]:
        return {**self.weights.named_tensors(), **self.head.named_tensors()}


@dataclass
class AdapterModel(Model):
    adapters: AdapterSet | None = None

    def __post_init__(self):
        self.weights.set_trainable(False)

    def hooks(self, fusion_masks: dict | None = None) -> list[Hook]:
        return self.adapters.hooks() if self.adapters is not None else []

    def all_parameters(self) -> list[Tensor]:
        extra = self.adapters.parameters() if self.adapters is not None else []
        return super().all_parameters() + extra

    def named_tensors(self) -> dict[str, Tensor]:
        out = dict(self.head.named_tensors())
        if self.adapters is not None:
            out.update(self.adapters.named_tensors())
        return out


@dataclass
class FusionModel(Model):
    stack: FusionStack | None = None

    def __post_init__(self):
        self.weights.set_trainable(False)
        for a in self.stack.adapters:
            a.freeze(True)

    def hooks(self, fusion_masks: dict | None = None) -> list[Hook]:
        return self.stack.hooks(fusion_masks)

    def all_parameters(self) -> list[Tensor]:
        return super().all_parameters() + self.stack.parameters() + self.stack.adapter_parameters()

    def named_tensors(self) -> dict[str, Tensor]:
        return {**self.head.named_tensors(), **self.stack.named_tensors()}


def build_adapter_model(config: EncoderConfig, adapter_config: AdapterConfig | None,
                        num_classes: int, seed: int = 0,
                        weights: EncoderWeights | None = None) -> AdapterModel:
    rng = np.random.default_rng(seed)
    weights = weights if weights is not None else EncoderWeights.initialize(config)
    adapters = AdapterSet.initialize(adapter_config, config, rng) if adapter_config else None
    head = TaskHead.initialize(config.hidden, num_classes, rng, config.dtype)
    return AdapterModel(config, weights, head, adapters)


def state_dict(model: Model) -> dict[str, np.ndarray]:
    return {k: t.data for k, t in model.named_tensors().items()}


def load_state(model: Model, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
    """Copy named arrays into ``model``'s tensors (fusion masks included).

    With ``strict``, names or shapes that do not line up raise ``ContractError``.
    """
    named = model.named_tensors()
    if strict:
        missing = sorted(set(named) - set(arrays))
        extra = sorted(set(arrays) - set(named))
        if missing or extra:
            raise ContractError(f"checkpoint mismatch: missing={missing[:5]} unexpected={extra[:5]}")
    for k, t in named.items():
        if k not in arrays:
            continue
        a = np.asarray(arrays[k])
        if a.shape != t.shape:
            raise ContractError(f"{k}: shape {a.shape} does not match model {t.shape}")
        t.data = a.astype(t.dtype, copy=True)
    if isinstance(model, FusionModel):
        if "fusion/active_layers" in arrays:
            model.stack.active_layers = np.asarray(arrays["fusion/active_layers"]) > 0.5
        if "fusion/active_adapters" in arrays:
            model.stack.active_adapters = np.asarray(arrays["fusion/active_adapters"]) > 0.5
