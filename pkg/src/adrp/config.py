"""Flat ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored. Every key must be one of
:data:`DEFAULTS`; anything else is rejected so typos never pass silently.
"""
from __future__ import annotations

from pathlib import Path
from typing import Any

from .adapters import AdapterConfig, DropPolicy
from .bench import BenchConfig
from .encoder import EncoderConfig
from .errors import ConfigError, ContractError
from .tasks import SyntheticTask
from .trainer import TrainConfig

# key -> default; the default's type is the parse type
DEFAULTS: dict[str, Any] = {
    "encoder.num_layers": 12,
    "encoder.hidden": 64,
    "encoder.heads": 4,
    "encoder.ff_dim": 256,
    "encoder.max_seq": 128,
    "encoder.vocab_size": 32,
    "encoder.seed": 0,
    "encoder.dtype": "float32",
    "adapter.architecture": "pfeiffer",
    "adapter.compression_rate": 16.0,
    "adapter.shared_across_layers": False,
    "drop.kind": "none",
    "drop.n": 0,
    "drop.lo": 0,
    "drop.hi": 11,
    "drop.rate": 0.0,
    "fusion.num_adapters": 8,
    "fusion.dropout_rate": 0.0,
    "fusion.strategy": "iterative",
    "fusion.keep": 2,
    "fusion.prune_mode": "per_layer",
    "train.mode": "adapter",
    "train.lr": 1e-2,
    "train.batch_size": 32,
    "train.epochs": 20,
    "train.seed": 0,
    "task.rule": "majority-token-class",
    "task.seed": 0,
    "task.seq_len": 16,
    "task.num_classes": 2,
    "task.train_size": 2000,
    "task.dev_size": 500,
    "bench.reps": 300,
    "bench.warmup_reps": 20,
    "bench.grid": "128x16",
    "bench.mode": "inference_step",
    "bench.threads": 0,
    "bench.machine": "",
}


def _parse_value(key: str, raw: str) -> Any:
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def _format_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


class RunConfig:
    def __init__(self, values: dict[str, Any] | None = None):
        self.values = dict(DEFAULTS)
        for k, v in (values or {}).items():
            if k not in DEFAULTS:
                raise ConfigError(k, "unknown key")
            self.values[k] = v

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def __eq__(self, other) -> bool:
        return isinstance(other, RunConfig) and self.values == other.values

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        values: dict[str, Any] = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}", f"expected 'key = value', got {line!r}")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in DEFAULTS:
                raise ConfigError(key, "unknown key")
            values[key] = _parse_value(key, raw)
        return cls(values)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.parse(Path(path).read_text(encoding="utf-8"))

    def serialize(self) -> str:
        return "".join(f"{k} = {_format_value(self.values[k])}\n" for k in sorted(self.values))

    # typed views ------------------------------------------------------------------------

    def _build(self, prefix: str, fn):
        try:
            return fn()
        except ContractError as e:
            raise ConfigError(prefix, str(e)) from e

    def encoder(self) -> EncoderConfig:
        v = self.values
        return self._build("encoder.*", lambda: EncoderConfig(
            num_layers=v["encoder.num_layers"], hidden=v["encoder.hidden"], heads=v["encoder.heads"],
            ff_dim=v["encoder.ff_dim"], max_seq=v["encoder.max_seq"], vocab_size=v["encoder.vocab_size"],
            seed=v["encoder.seed"], dtype=v["encoder.dtype"]))

    def adapter(self) -> AdapterConfig:
        v = self.values
        return self._build("adapter.*", lambda: AdapterConfig(
            v["adapter.architecture"], v["adapter.compression_rate"], v["adapter.shared_across_layers"]))

    def drop_policy(self) -> DropPolicy:
        v = self.values
        kind = v["drop.kind"]
        if kind == "none":
            pol = DropPolicy.none()
        elif kind == "specialized":
            pol = DropPolicy.specialized(v["drop.n"])
        elif kind == "robust":
            pol = DropPolicy.robust(v["drop.lo"], v["drop.hi"])
        elif kind == "random":
            pol = DropPolicy.random_layers(v["drop.rate"])
        else:
            raise ConfigError("drop.kind", f"unknown policy {kind!r}")
        self._build("drop.*", lambda: pol.validate(v["encoder.num_layers"]))
        return pol

    def train(self) -> TrainConfig:
        v = self.values
        return self._build("train.*", lambda: TrainConfig(
            lr=v["train.lr"], batch_size=v["train.batch_size"], epochs=v["train.epochs"],
            seed=v["train.seed"], drop_policy=self.drop_policy(),
            fusion_dropout_rate=v["fusion.dropout_rate"]))

    def task(self, task_id: str = "task", seed: int | None = None, rule: str | None = None) -> SyntheticTask:
        v = self.values
        return self._build("task.*", lambda: SyntheticTask(
            task_id=task_id, rule=rule or v["task.rule"],
            seed=v["task.seed"] if seed is None else seed,
            vocab_size=v["encoder.vocab_size"], seq_len=v["task.seq_len"],
            num_classes=v["task.num_classes"], train_size=v["task.train_size"],
            dev_size=v["task.dev_size"]))

    def bench(self) -> BenchConfig:
        v = self.values
        grid = parse_grid(v["bench.grid"])
        kw = dict(reps=v["bench.reps"], warmup_reps=v["bench.warmup_reps"], grid=grid, mode=v["bench.mode"])
        if v["bench.threads"]:
            kw["thread_count"] = v["bench.threads"]
        if v["bench.machine"]:
            kw["machine"] = v["bench.machine"]
        return self._build("bench.*", lambda: BenchConfig(**kw))


def parse_grid(text: str) -> list[tuple[int, int]]:
    """``"128x16,512x32"`` -> ``[(128, 16), (512, 32)]`` as (seq_len, batch)."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            s, b = part.lower().split("x")
            out.append((int(s), int(b)))
        except ValueError:
            raise ConfigError("bench.grid", f"bad grid point {part!r}; expected SEQxBATCH") from None
    return out


def parse_range(text: str) -> list[int]:
    """Inclusive ``a..b`` range, or a comma list of ints."""
    text = text.strip()
    if ".." in text:
        a, b = text.split("..", 1)
        lo, hi = int(a), int(b)
        if hi < lo:
            raise ValueError(f"empty range {text!r}")
        return list(range(lo, hi + 1))
    return [int(p) for p in text.split(",") if p.strip()]
