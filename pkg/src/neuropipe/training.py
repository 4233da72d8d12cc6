"""Shared training plumbing: optimizer settings, loss history and divergence checks."""
from __future__ import annotations

import contextlib
import csv
import math
import os
from dataclasses import dataclass, field
from typing import Iterator, Optional, TextIO, Union

import torch

from .errors import BadConfig, DivergedLoss, IoFailure

HISTORY_HEADER = ("iteration", "train_loss", "test_loss", "accuracy")


@dataclass
class TrainConfig:
    iterations: int = 200
    batch_size: int = 16
    lr: float = 1e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    eval_every: int = 10
    # "cosine" anneals the learning rate to zero over the run
    schedule: str = "constant"

    def __post_init__(self):
        if self.iterations < 0:
            raise BadConfig(f"iterations must be >= 0, got {self.iterations}")
        if self.batch_size < 1:
            raise BadConfig(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr < 0 or self.weight_decay < 0:
            raise BadConfig("learning rate and weight decay must be >= 0")
        if self.eval_every < 1:
            raise BadConfig(f"eval_every must be >= 1, got {self.eval_every}")
        if self.optimizer not in ("adam", "sgd"):
            raise BadConfig(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("constant", "cosine"):
            raise BadConfig(f"unknown schedule {self.schedule!r}")


def make_scheduler(opt: torch.optim.Optimizer, cfg: TrainConfig) -> Optional[torch.optim.lr_scheduler.LRScheduler]:
    """Per-iteration schedule for ``opt``, or None for a constant rate."""
    if cfg.schedule == "cosine" and cfg.iterations > 0:
        return torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.iterations)
    return None


def make_optimizer(params, cfg: TrainConfig) -> torch.optim.Optimizer:
    params = [p for p in params if p.requires_grad]
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    return torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)


@contextlib.contextmanager
def seeded(seed: int) -> Iterator[None]:
    """Run a block under a fixed torch seed without disturbing the caller's RNG."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


@dataclass
class HistoryRow:
    iteration: int
    train_loss: float
    test_loss: float
    accuracy: float

    def as_tuple(self) -> tuple:
        return (self.iteration, self.train_loss, self.test_loss, self.accuracy)


@dataclass
class TrainHistory:
    """Per-iteration record of the training loss and the latest evaluation.

    ``test_loss`` and ``accuracy`` refer to the evaluation split (the training
    split when no separate one is given) and are refreshed every
    ``eval_every`` iterations; rows in between repeat the latest values.
    """

    rows: list[HistoryRow] = field(default_factory=list)
    sink: Optional[TextIO] = field(default=None, repr=False, compare=False)

    def append(self, iteration: int, train_loss: float, test_loss: float, accuracy: float) -> None:
        row = HistoryRow(int(iteration), float(train_loss), float(test_loss), float(accuracy))
        self.rows.append(row)
        if self.sink is not None:
            self.sink.write(",".join([str(row.iteration)] + [repr(v) for v in row.as_tuple()[1:]]) + "\n")
            self.sink.flush()

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def train_losses(self) -> list[float]:
        return [r.train_loss for r in self.rows]

    @property
    def final(self) -> Optional[HistoryRow]:
        return self.rows[-1] if self.rows else None

    def write(self, path: Union[str, os.PathLike]) -> None:
        try:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(",".join(HISTORY_HEADER) + "\n")
                for r in self.rows:
                    fh.write(",".join([str(r.iteration)] + [repr(v) for v in r.as_tuple()[1:]]) + "\n")
        except OSError as exc:
            raise IoFailure(f"cannot write history {path}: {exc}") from exc

    @classmethod
    def read(cls, path: Union[str, os.PathLike]) -> "TrainHistory":
        h = cls()
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            next(reader)
            for row in reader:
                h.rows.append(HistoryRow(int(row[0]), float(row[1]), float(row[2]), float(row[3])))
        return h


def open_history(path: Optional[Union[str, os.PathLike]]) -> TrainHistory:
    """History that streams each row to ``path`` as it is recorded."""
    if path is None:
        return TrainHistory()
    try:
        fh = open(path, "w", encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot open history {path}: {exc}") from exc
    fh.write(",".join(HISTORY_HEADER) + "\n")
    fh.flush()
    return TrainHistory(sink=fh)


def close_history(history: TrainHistory) -> None:
    if history.sink is not None:
        history.sink.close()
        history.sink = None


def check_finite(loss: torch.Tensor, iteration: int, parts: Optional[dict] = None) -> float:
    value = float(loss.detach())
    if not math.isfinite(value):
        detail = ""
        if parts:
            detail = " (" + ", ".join(f"{k}={float(v):.4g}" for k, v in parts.items()) + ")"
        raise DivergedLoss(f"loss became {value} at iteration {iteration}{detail}")
    return value


def batch_indices(n: int, batch_size: int, generator: torch.Generator) -> Iterator[list[int]]:
    """Endless stream of minibatches drawn from reshuffled epochs."""
    while True:
        perm = torch.randperm(n, generator=generator).tolist()
        for start in range(0, n, batch_size):
            chunk = perm[start : start + batch_size]
            if len(chunk) < batch_size and n >= batch_size:
                # drop the ragged tail so every batch has the same size
                break
            yield chunk
