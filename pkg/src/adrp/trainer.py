"""Adam training loops for adapters, full fine-tuning and fusion; dev evaluation."""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .adapters import AdapterConfig, AdapterSet, DropPolicy, sample_dropped_layers
from .encoder import EncoderConfig, EncoderWeights, TaskHead
from .errors import ContractError, TrainingError
from .fusion import FusionStack, layer_dropout_masks
from .models import AdapterModel, FullModel, FusionModel, Model
from .tasks import SyntheticTask, TaskData
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    drop_policy: DropPolicy = field(default_factory=DropPolicy.none)
    fusion_dropout_rate: float = 0.0
    truncate_backward: bool = True
    eval_drop_n: int | None = None

    def __post_init__(self):
        if not self.lr > 0:
            raise ContractError("lr must be positive")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ContractError("epochs must be >= 0")

    def dev_drop_n(self) -> int:
        if self.eval_drop_n is not None:
            return self.eval_drop_n
        return self.drop_policy.n if self.drop_policy.kind == "specialized" else 0


class Adam:
    def __init__(self, params: list[Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class StepResult:
    loss: float
    drop_n: int
    visited: int
    tape_len: int


def train_step(batch: tuple[np.ndarray, np.ndarray], model: Model, config: TrainConfig,
               rng: np.random.Generator, optimizer: Adam, step_index: int = 0) -> StepResult:
    """Sample a drop level, run forward + truncated backward, update trainable params."""
    x, y = batch
    n, extra = sample_dropped_layers(config.drop_policy, rng, model.config.num_layers)
    masks = None
    if isinstance(model, FusionModel) and config.fusion_dropout_rate > 0:
        masks = layer_dropout_masks(model.stack, config.fusion_dropout_rate, rng)
    with T.Graph() as graph:
        logits = model.forward(x, drop_n=n, dropped_layers=extra, fusion_masks=masks)
        loss = T.cross_entropy(logits, y)
    value = float(loss.data)
    if not np.isfinite(value):
        raise TrainingError(f"non-finite loss at step {step_index}")
    stop = graph.first_param_node if config.truncate_backward else None
    visited = T.backward(loss, stop_below=stop)
    optimizer.step()
    optimizer.zero_grad()
    return StepResult(value, n, visited, len(graph))


def evaluate(model: Model, x: np.ndarray, y: np.ndarray, drop_n: int = 0, batch_size: int = 256) -> float:
    correct = 0
    with T.no_grad():
        for i in range(0, len(x), batch_size):
            logits = model.forward(x[i:i + batch_size], drop_n=drop_n)
            correct += int((logits.data.argmax(axis=-1) == y[i:i + batch_size]).sum())
    return correct / max(1, len(x))


def evaluate_task(model: Model, task: SyntheticTask | TaskData, drop_n: int = 0) -> float:
    data = task.generate() if isinstance(task, SyntheticTask) else task
    return evaluate(model, data.dev_x, data.dev_y, drop_n)


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    dev_acc: float
    sampled_n_histogram: dict

    def row(self) -> dict:
        hist = ";".join(f"{k}:{v}" for k, v in sorted(self.sampled_n_histogram.items()))
        return {"epoch": self.epoch, "train_loss": self.train_loss, "dev_acc": self.dev_acc,
                "sampled_n_histogram": hist}


@dataclass
class TrainResult:
    model: Model
    metrics: list[EpochMetrics]
    best_epoch: int
    best_dev_acc: float
    drop_log: list[int]


def fit(model: Model, data: TaskData, config: TrainConfig) -> TrainResult:
    """Epoch loop with per-epoch dev evaluation and best-epoch restore."""
    config.drop_policy.validate(model.config.num_layers)
    rng = np.random.default_rng(config.seed)
    params = model.trainable()
    opt = Adam(params, config.lr, config.beta1, config.beta2, config.eps)
    eval_n = config.dev_drop_n()
    best_acc = evaluate(model, data.dev_x, data.dev_y, eval_n)
    best_epoch = 0
    best_state = [p.data.copy() for p in params]
    metrics = [EpochMetrics(0, float("nan"), best_acc, {})]
    drop_log: list[int] = []
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(data.train_x))
        losses = []
        hist: Counter = Counter()
        for i in range(0, len(order), config.batch_size):
            idx = order[i:i + config.batch_size]
            res = train_step((data.train_x[idx], data.train_y[idx]), model, config, rng, opt, step)
            losses.append(res.loss)
            hist[res.drop_n] += 1
            drop_log.append(res.drop_n)
            step += 1
        acc = evaluate(model, data.dev_x, data.dev_y, eval_n)
        metrics.append(EpochMetrics(epoch, float(np.mean(losses)), acc, dict(hist)))
        log.info("epoch %d loss %.4f dev_acc %.4f", epoch, np.mean(losses), acc)
        if acc > best_acc:
            best_acc, best_epoch = acc, epoch
            best_state = [p.data.copy() for p in params]
    for p, s in zip(params, best_state):
        p.data = s
    return TrainResult(model, metrics, best_epoch, best_acc, drop_log)


def train_adapter(task: SyntheticTask, config: TrainConfig, encoder_config: EncoderConfig,
                  adapter_config: AdapterConfig, weights: EncoderWeights | None = None,
                  init_seed: int | None = None) -> TrainResult:
    weights = weights if weights is not None else EncoderWeights.initialize(encoder_config)
    rng = np.random.default_rng(config.seed if init_seed is None else init_seed)
    adapters = AdapterSet.initialize(adapter_config, encoder_config, rng)
    head = TaskHead.initialize(encoder_config.hidden, task.num_classes, rng, encoder_config.dtype)
    model = AdapterModel(encoder_config, weights, head, adapters)
    return fit(model, task.generate(), config)


def train_full(task: SyntheticTask, config: TrainConfig, encoder_config: EncoderConfig,
               weights: EncoderWeights | None = None) -> TrainResult:
    weights = weights if weights is not None else EncoderWeights.initialize(encoder_config)
    rng = np.random.default_rng(config.seed)
    head = TaskHead.initialize(encoder_config.hidden, task.num_classes, rng, encoder_config.dtype)
    return fit(FullModel(encoder_config, weights, head), task.generate(), config)


def train_fusion(task: SyntheticTask, adapters: list[AdapterSet], config: TrainConfig,
                 encoder_config: EncoderConfig, weights: EncoderWeights | None = None,
                 strategy: str = "iterative") -> TrainResult:
    """Train fusion Q/K/V and a fresh head over frozen adapters and a frozen base."""
    if len(adapters) < 2:
        raise ContractError("fusion training needs at least two adapters")
    weights = weights if weights is not None else EncoderWeights.initialize(encoder_config)
    rng = np.random.default_rng(config.seed)
    stack = FusionStack.initialize(adapters, encoder_config, rng, strategy=strategy)
    head = TaskHead.initialize(encoder_config.hidden, task.num_classes, rng, encoder_config.dtype)
    model = FusionModel(encoder_config, weights, head, stack)
    return fit(model, task.generate(), config)
