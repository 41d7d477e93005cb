"""Closed-set classifier trained with cross-entropy on known knowns only."""

from __future__ import annotations

import copy
import logging
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .dataset import Dataset, Role
from .errors import ConfigurationError, MissingClassError, TrainingError
from .networks import BaseNet, load_checkpoint, run_batched
from .training import EpochStats, TrainConfig, sgd

logger = logging.getLogger(__name__)


class ClassifierModel(BaseNet):
    """f: x -> R^C over the known classes.

    ``class_ids`` maps head index ``i`` (contiguous label ``i + 1``) to the
    dataset class id; it is sorted ascending so that the lowest contiguous
    label is also the lowest dataset id.
    """

    def __init__(
        self,
        input_shape,
        class_ids: Sequence[int],
        architecture_id: str = "mlp2",
        hidden: int = 128,
        seed: int = 0,
        dtype=torch.float64,
    ):
        class_ids = sorted(int(c) for c in class_ids)
        if len(class_ids) < 2:
            raise ConfigurationError("a classifier needs at least 2 classes")
        if len(set(class_ids)) != len(class_ids):
            raise ConfigurationError("duplicate class ids")
        super().__init__(architecture_id, input_shape, len(class_ids), hidden, seed, dtype)
        self.class_ids = class_ids
        self.n_classes = len(class_ids)

    def to_index(self, labels) -> np.ndarray:
        lookup = {c: i for i, c in enumerate(self.class_ids)}
        try:
            return np.array([lookup[int(c)] for c in labels], dtype=np.int64)
        except KeyError as exc:
            raise MissingClassError(f"label {exc.args[0]} is not a classifier class") from None

    def checkpoint(self, config_hash: Optional[str] = None) -> dict:
        out = super().checkpoint()
        out.update(kind="classifier", n_classes=self.n_classes, class_ids=list(self.class_ids),
                   class_mapping={str(i + 1): c for i, c in enumerate(self.class_ids)},
                   config_hash=config_hash)
        return out

    @classmethod
    def from_checkpoint(cls, ckpt) -> "ClassifierModel":
        if not isinstance(ckpt, dict):
            ckpt = load_checkpoint(ckpt)
        model = cls(ckpt["input_shape"], ckpt["class_ids"], ckpt["architecture_id"], ckpt["hidden"],
                    ckpt["seed"], getattr(torch, ckpt["dtype"]))
        model.load_state_dict(ckpt["state_dict"])
        return model


def argmax_label(logits) -> np.ndarray:
    """1-indexed argmax; ties resolve to the lowest label."""
    return np.argmax(np.asarray(logits), axis=-1) + 1


def logits_of(model: ClassifierModel, x) -> np.ndarray:
    out, _ = run_batched(model, x)
    return out


def classify(model: ClassifierModel, x):
    """Return ``(predicted_class, logits)`` for one sample or arrays for a batch.

    ``predicted_class`` is the dataset class id.
    """
    logits = logits_of(model, x)
    ids = np.asarray(model.class_ids)[argmax_label(logits) - 1]
    if logits.ndim == 1:
        return int(ids), logits
    return ids, logits


def cross_entropy_grad(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Closed-form gradient of mean cross-entropy w.r.t. logits (0-indexed targets)."""
    z = np.asarray(logits, dtype=np.float64)
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(len(z)), targets] -= 1.0
    return p / len(z)


def train_classifier(
    train_KK: Dataset,
    model_init: ClassifierModel,
    train_cfg: TrainConfig,
    telemetry: Optional[list] = None,
) -> ClassifierModel:
    if train_KK.roles is not None and np.any(train_KK.roles != Role.KK.value):
        raise ConfigurationError("the classifier trains on known-known samples only")
    missing = sorted(set(model_init.class_ids) - set(train_KK.classes))
    if missing:
        raise MissingClassError(f"train_KK lacks samples of classes {missing}")
    if train_cfg.epochs == 0:
        return model_init

    model = copy.deepcopy(model_init)
    model.train()
    opt = sgd(model, train_cfg)
    rng = np.random.default_rng(train_cfg.seed)
    x_all, _ = model.as_input(train_KK.features)
    y_all = torch.as_tensor(model.to_index(train_KK.labels))

    for epoch in range(train_cfg.epochs):
        order = rng.permutation(len(x_all))
        total, seen, correct = 0.0, 0, 0
        for start in range(0, len(order), train_cfg.batch_size):
            idx = order[start : start + train_cfg.batch_size]
            logits = model(x_all[idx])
            loss = F.cross_entropy(logits, y_all[idx])
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite cross-entropy at epoch {epoch}", epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
            correct += int((logits.argmax(1) == y_all[idx]).sum())
        stats = EpochStats(epoch, total / seen, seen)
        logger.debug("classifier epoch %d loss %.6f acc %.4f", epoch, stats.mean_loss, correct / seen)
        if telemetry is not None:
            telemetry.append(stats)
    model.eval()
    return model
