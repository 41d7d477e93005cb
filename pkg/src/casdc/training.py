"""Training configuration and loop plumbing shared by the two networks."""

from __future__ import annotations

import csv
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from pathlib import Path

import torch

from .errors import ConfigurationError


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 0.01
    weight_decay: float = 5e-4
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be positive")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ConfigurationError("weight_decay must be >= 0 and momentum in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    mean_loss: float
    count: int  # mined triplets (embedding) or samples seen (classifier)


def sgd(model, cfg: TrainConfig):
    # weight_decay is the L2 penalty folded into the SGD update
    return torch.optim.SGD(
        model.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum, weight_decay=cfg.weight_decay
    )


@contextmanager
def deterministic(enabled: bool = True):
    """Single-threaded, deterministic-kernel execution for reproducible runs."""
    if not enabled:
        yield
        return
    threads = torch.get_num_threads()
    flag = torch.are_deterministic_algorithms_enabled()
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.set_num_threads(threads)
        torch.use_deterministic_algorithms(flag)


def write_telemetry(stats, path, count_name: str) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_loss", count_name])
        for s in stats:
            w.writerow([s.epoch, repr(float(s.mean_loss)), s.count])
