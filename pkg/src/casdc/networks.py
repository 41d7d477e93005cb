"""Desk-scale backbones and the checkpoint container shared by both models.

Backbones:

``mlp2``   Flatten -> Linear(in, hidden) -> ReLU -> Linear(hidden, out)
``conv3``  three [Conv3x3 -> ReLU -> MaxPool2] blocks, global average pool, Linear(width*4, out)
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from .errors import ShapeMismatchError

ARCHITECTURES = ("mlp2", "conv3")


def build_backbone(architecture_id: str, input_shape, out_dim: int, hidden: int = 128) -> nn.Module:
    input_shape = tuple(input_shape)
    if architecture_id == "mlp2":
        return nn.Sequential(
            nn.Flatten(),
            nn.Linear(int(math.prod(input_shape)), hidden),
            nn.ReLU(),
            nn.Linear(hidden, out_dim),
        )
    if architecture_id == "conv3":
        if len(input_shape) != 3:
            raise ValueError(f"conv3 expects C x H x W inputs, got {input_shape}")
        c, w = input_shape[0], hidden
        blocks = []
        for cin, cout in ((c, w), (w, 2 * w), (2 * w, 4 * w)):
            blocks += [nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2)]
        return nn.Sequential(
            *blocks, nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(4 * w, out_dim)
        )
    raise ValueError(f"unknown architecture {architecture_id!r}; expected one of {ARCHITECTURES}")


class BaseNet(nn.Module):
    """Backbone wrapper that records what it expects as input."""

    def __init__(self, architecture_id, input_shape, out_dim, hidden, seed, dtype):
        super().__init__()
        self.architecture_id = architecture_id
        self.input_shape = tuple(int(s) for s in input_shape)
        self.hidden = hidden
        self.seed = seed
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.backbone = build_backbone(architecture_id, self.input_shape, out_dim, hidden)
        self.to(dtype)

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def forward(self, x):
        return self.backbone(x)

    def as_input(self, x) -> tuple[torch.Tensor, bool]:
        """Convert ``x`` to a batch tensor; the flag tells whether it was a single sample."""
        t = x if isinstance(x, torch.Tensor) else torch.from_numpy(np.array(x, copy=True))
        n = len(self.input_shape)
        single = t.dim() == n
        if single:
            t = t.unsqueeze(0)
        if t.dim() != n + 1 or tuple(t.shape[1:]) != self.input_shape:
            raise ShapeMismatchError(
                f"expected input of shape {self.input_shape} (or a batch of it), got {tuple(t.shape)}"
            )
        return t.to(self.dtype), single

    def checkpoint(self) -> dict:
        return {
            "architecture_id": self.architecture_id,
            "input_shape": list(self.input_shape),
            "hidden": self.hidden,
            "seed": self.seed,
            "dtype": str(self.dtype).replace("torch.", ""),
            "state_dict": {k: v.detach().clone() for k, v in self.state_dict().items()},
        }


def run_batched(model: BaseNet, x, batch_size: int = 2048) -> tuple[np.ndarray, bool]:
    t, single = model.as_input(x)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            out = torch.cat([model(t[i : i + batch_size]) for i in range(0, len(t), batch_size)]) \
                if len(t) else model(t)
    finally:
        model.train(was_training)
    out = out.numpy().astype(np.float64)
    return (out[0] if single else out), single


def save_checkpoint(payload: dict, path) -> None:
    torch.save(payload, path)


def load_checkpoint(path) -> dict:
    return torch.load(path, map_location="cpu", weights_only=False)


def parameter_vector(model: nn.Module) -> np.ndarray:
    return torch.cat([p.detach().reshape(-1) for p in model.parameters()]).numpy().copy()
