"""Seeded synthetic sequence-classification tasks.

Token 0 is a ``[CLS]`` marker at position 0 of every sequence; the encoder
pools that position, so every rule forces information to flow through
attention.

* ``majority-token-class``: tokens ``1..C`` are class markers; the label is
  the marker that occurs most often (a unique maximum is guaranteed).
* ``first-token-parity``: parity of the first content token (position 1).
* ``pattern-presence``: whether the bigram ``(1, 2)`` occurs anywhere;
  this needs adjacent-position composition, which only early layers can do.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

RULES = ("majority-token-class", "first-token-parity", "pattern-presence")
CLS = 0


@dataclass(frozen=True)
class TaskData:
    train_x: np.ndarray
    train_y: np.ndarray
    dev_x: np.ndarray
    dev_y: np.ndarray


@dataclass(frozen=True)
class SyntheticTask:
    task_id: str = "majority"
    rule: str = "majority-token-class"
    seed: int = 0
    vocab_size: int = 32
    seq_len: int = 16
    num_classes: int = 2
    train_size: int = 2000
    dev_size: int = 500

    def __post_init__(self):
        if self.rule not in RULES:
            raise ContractError(f"unknown task rule {self.rule!r}; expected one of {RULES}")
        if self.num_classes < 2:
            raise ContractError("num_classes must be >= 2")
        if self.rule != "majority-token-class" and self.num_classes != 2:
            raise ContractError(f"{self.rule} is a binary task")
        if self.vocab_size < self.num_classes + 3:
            raise ContractError("vocab too small for class markers plus filler")
        if self.seq_len < 4:
            raise ContractError("seq_len must be >= 4")

    def _sample(self, rng: np.random.Generator) -> tuple[np.ndarray, int]:
        s, V, C = self.seq_len, self.vocab_size, self.num_classes
        body = s - 1
        if self.rule == "majority-token-class":
            y = int(rng.integers(C))
            cap = max(1, body // (C + 1))
            counts = rng.integers(0, cap + 1, size=C)
            top = counts[np.arange(C) != y].max()
            counts[y] = min(body - counts.sum() + counts[y], top + 1 + int(rng.integers(0, 2)))
            seq = np.concatenate([np.repeat(np.arange(1, C + 1), counts),
                                  rng.integers(C + 1, V, size=body - counts.sum())])
            rng.shuffle(seq)
            return np.concatenate([[CLS], seq]), y
        if self.rule == "first-token-parity":
            seq = rng.integers(1, V, size=body)
            return np.concatenate([[CLS], seq]), int(seq[0] % 2)
        # pattern-presence: filler avoids tokens 1 and 2 so the bigram appears only when planted
        y = int(rng.integers(2))
        seq = rng.integers(1, V, size=body)
        for i in range(body - 1):
            while seq[i] == 1 and seq[i + 1] == 2:
                seq[i + 1] = rng.integers(3, V)
        if y:
            at = int(rng.integers(0, body - 1))
            seq[at], seq[at + 1] = 1, 2
        return np.concatenate([[CLS], seq]), y

    def generate(self) -> TaskData:
        """Deterministic for a given seed; dev rows never repeat a train row."""
        rng = np.random.default_rng(self.seed)
        seen: set[bytes] = set()
        rows: list[np.ndarray] = []
        labels: list[int] = []
        need = self.train_size + self.dev_size
        attempts = 0
        while len(rows) < need:
            attempts += 1
            if attempts > 50 * need:
                raise ContractError("task space too small for the requested train/dev sizes")
            x, y = self._sample(rng)
            key = x.astype(np.int32).tobytes()
            if key in seen:
                continue
            seen.add(key)
            rows.append(x)
            labels.append(y)
        X = np.stack(rows).astype(np.int64)
        Y = np.asarray(labels, dtype=np.int64)
        n = self.train_size
        return TaskData(X[:n], Y[:n], X[n:], Y[n:])


def label_rule(task: SyntheticTask, x: np.ndarray) -> int:
    """Recompute a label from a sequence (independent of the generator)."""
    body = x[1:]
    if task.rule == "majority-token-class":
        counts = np.array([(body == c).sum() for c in range(1, task.num_classes + 1)])
        return int(counts.argmax())
    if task.rule == "first-token-parity":
        return int(body[0] % 2)
    return int(any(body[i] == 1 and body[i + 1] == 2 for i in range(len(body) - 1)))
