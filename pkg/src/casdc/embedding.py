"""Embedding network trained with a hinged triplet loss.

Anchors and positives are known-known (KK) samples, negatives are
known-unknown (KU) samples, so the network learns to pull every known sample
together and push known unknowns at least ``margin`` away in squared
Euclidean distance::

    loss = mean_t max(0, |g(a) - g(p)|^2 - |g(a) - g(n)|^2 + margin)

Positives are class agnostic: any KK sample other than the anchor qualifies.
"""

from __future__ import annotations

import copy
import logging
import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .dataset import Dataset, Role
from .errors import ConfigurationError, EmptyTripletWarning, MiningError, TrainingError
from .networks import BaseNet, load_checkpoint, run_batched
from .training import EpochStats, TrainConfig, sgd

logger = logging.getLogger(__name__)

STRATEGIES = ("semihard", "hard", "combined")
POSITIVE_SELECTIONS = ("hardest", "random", "all")
COMBINED_MODES = ("union", "alternate")
MAX_MARGIN = 2.0


class EmbeddingModel(BaseNet):
    """g: x -> R^d. ``normalize`` projects outputs onto the unit sphere."""

    def __init__(
        self,
        input_shape,
        embed_dim: int = 128,
        architecture_id: str = "mlp2",
        hidden: int = 128,
        seed: int = 0,
        normalize: bool = False,
        dtype=torch.float64,
    ):
        super().__init__(architecture_id, input_shape, embed_dim, hidden, seed, dtype)
        self.embed_dim = embed_dim
        self.normalize = normalize

    def forward(self, x):
        z = self.backbone(x)
        return F.normalize(z, dim=1) if self.normalize else z

    def checkpoint(self, config_hash: Optional[str] = None) -> dict:
        out = super().checkpoint()
        out.update(kind="embedding", embed_dim=self.embed_dim, normalize=self.normalize,
                   config_hash=config_hash)
        return out

    @classmethod
    def from_checkpoint(cls, ckpt) -> "EmbeddingModel":
        if not isinstance(ckpt, dict):
            ckpt = load_checkpoint(ckpt)
        model = cls(
            ckpt["input_shape"], ckpt["embed_dim"], ckpt["architecture_id"], ckpt["hidden"],
            ckpt["seed"], ckpt["normalize"], getattr(torch, ckpt["dtype"]),
        )
        model.load_state_dict(ckpt["state_dict"])
        return model


@dataclass(frozen=True)
class Triplet:
    anchor_idx: int
    positive_idx: int
    negative_idx: int


@dataclass(frozen=True)
class TripletLossConfig:
    margin: float = 0.1
    mining_strategy: str = "combined"
    positive_selection: Optional[str] = None  # None: hardest for hard, random for semihard
    combined_mode: str = "union"
    reduction: str = "mean"

    def __post_init__(self):
        if not 0 < self.margin <= MAX_MARGIN:
            raise ConfigurationError(f"margin must lie in (0, {MAX_MARGIN}], got {self.margin}")
        if self.mining_strategy not in STRATEGIES:
            raise ConfigurationError(f"mining_strategy must be one of {STRATEGIES}")
        if self.positive_selection not in (None,) + POSITIVE_SELECTIONS:
            raise ConfigurationError(f"positive_selection must be one of {POSITIVE_SELECTIONS}")
        if self.combined_mode not in COMBINED_MODES:
            raise ConfigurationError(f"combined_mode must be one of {COMBINED_MODES}")
        if self.reduction != "mean":
            raise ConfigurationError("only mean reduction is supported")


def embed(model: EmbeddingModel, x) -> np.ndarray:
    """Embed one sample (returns shape ``(d,)``) or a batch (``(n, d)``)."""
    out, _ = run_batched(model, x)
    return out


def _triplet_array(triplets) -> np.ndarray:
    if isinstance(triplets, np.ndarray):
        return triplets.reshape(-1, 3).astype(np.int64)
    return np.array([(t.anchor_idx, t.positive_idx, t.negative_idx) for t in triplets],
                    dtype=np.int64).reshape(-1, 3)


def triplet_loss(embeddings, triplets, margin: float) -> torch.Tensor:
    """Mean hinged triplet loss over ``triplets`` (indices into ``embeddings``).

    An empty triplet list gives a constant zero (no gradient) and an
    :class:`EmptyTripletWarning`.
    """
    if margin <= 0:
        raise ConfigurationError("margin must be positive")
    emb = torch.as_tensor(embeddings)
    idx = _triplet_array(triplets)
    if len(idx) == 0:
        warnings.warn("triplet loss over an empty triplet list", EmptyTripletWarning, stacklevel=2)
        return torch.zeros((), dtype=emb.dtype)
    if idx.min() < 0 or idx.max() >= len(emb):
        raise IndexError("triplet index out of range")
    idx = torch.as_tensor(idx)
    a, p, n = emb[idx[:, 0]], emb[idx[:, 1]], emb[idx[:, 2]]
    d_ap = ((a - p) ** 2).sum(dim=1)
    d_an = ((a - n) ** 2).sum(dim=1)
    return torch.clamp(d_ap - d_an + margin, min=0).mean()


def triplet_loss_grad(embeddings: np.ndarray, triplets, margin: float) -> np.ndarray:
    """Closed-form gradient of :func:`triplet_loss` w.r.t. the embeddings."""
    emb = np.asarray(embeddings, dtype=np.float64)
    idx = _triplet_array(triplets)
    grad = np.zeros_like(emb)
    if len(idx) == 0:
        return grad
    a, p, n = emb[idx[:, 0]], emb[idx[:, 1]], emb[idx[:, 2]]
    active = (((a - p) ** 2).sum(1) - ((a - n) ** 2).sum(1) + margin) > 0
    scale = active[:, None] / len(idx)
    np.add.at(grad, idx[:, 0], scale * 2 * (n - p))
    np.add.at(grad, idx[:, 1], scale * -2 * (a - p))
    np.add.at(grad, idx[:, 2], scale * 2 * (a - n))
    return grad


def pairwise_sq_dists(emb: np.ndarray) -> np.ndarray:
    diff = emb[:, None, :] - emb[None, :, :]
    return (diff * diff).sum(-1)


def _role_values(roles) -> np.ndarray:
    return np.array([r.value if isinstance(r, Role) else str(r) for r in roles])


def _positive_mask(d, kk, anchors, selection, rng) -> np.ndarray:
    """Boolean (B, B) mask of chosen (anchor, positive) pairs."""
    b = len(d)
    mask = np.zeros((b, b), dtype=bool)
    if len(anchors) == 0:
        return mask
    cand = np.zeros((b, b), dtype=bool)
    cand[np.ix_(anchors, kk)] = True
    cand[anchors, anchors] = False
    if selection == "all":
        return cand
    if selection == "hardest":
        scores = np.where(cand[anchors], d[anchors], -np.inf)
        mask[anchors, np.argmax(scores, axis=1)] = True
        return mask
    for a in anchors:
        options = np.flatnonzero(cand[a])
        mask[a, options[rng.integers(len(options))]] = True
    return mask


def _triplet_mask(d, pos_mask, ku_mask, kind, margin) -> np.ndarray:
    d_ap = d[:, :, None]
    d_an = d[:, None, :]
    if kind == "hard":
        cond = d_an < d_ap
    else:
        cond = (d_an >= d_ap) & (d_an < d_ap + margin)
    return pos_mask[:, :, None] & ku_mask[None, None, :] & cond


def mine_triplets(
    embeddings,
    roles: Sequence,
    strategy: str,
    margin: float,
    positive_selection: Optional[str] = None,
    combined_mode: str = "union",
    rng: Optional[np.random.Generator] = None,
) -> list:
    """Mine (anchor, positive, negative) index triplets from one batch.

    Every KK sample serves as an anchor. Its positive is another KK sample
    chosen by ``positive_selection`` (default: the farthest one for the hard
    rule, a random one for the semihard rule; ``"all"`` keeps every KK
    sample). Negatives are all KU samples satisfying the rule:

    * hard: ``d(a, n) < d(a, p)``
    * semihard: ``d(a, p) <= d(a, n) < d(a, p) + margin``

    ``combined`` takes the union of both rule sets, or with
    ``combined_mode="alternate"`` applies hard to even anchors and semihard to
    odd anchors (in batch order). The result is sorted and duplicate free.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"strategy must be one of {STRATEGIES}")
    if positive_selection not in (None,) + POSITIVE_SELECTIONS:
        raise ValueError(f"positive_selection must be one of {POSITIVE_SELECTIONS}")
    emb = np.asarray(embeddings.detach() if isinstance(embeddings, torch.Tensor) else embeddings,
                     dtype=np.float64)
    roles = _role_values(roles)
    kk = np.flatnonzero(roles == Role.KK.value)
    ku = np.flatnonzero(roles == Role.KU.value)
    if len(kk) < 2:
        raise MiningError(f"batch needs >= 2 KK samples, has {len(kk)}", Role.KK)
    if len(ku) < 1:
        raise MiningError("batch needs >= 1 KU sample, has 0", Role.KU)
    if rng is None:
        rng = np.random.default_rng(0)

    d = pairwise_sq_dists(emb)
    ku_mask = roles == Role.KU.value
    if strategy == "combined" and combined_mode == "alternate":
        plan = (("hard", kk[0::2]), ("semihard", kk[1::2]))
    elif strategy == "combined":
        plan = (("hard", kk), ("semihard", kk))
    else:
        plan = ((strategy, kk),)
    default_sel = {"hard": "hardest", "semihard": "random"}
    found = np.zeros((len(emb),) * 3, dtype=bool)
    for kind, anchors in plan:
        pos = _positive_mask(d, kk, anchors, positive_selection or default_sel[kind], rng)
        found |= _triplet_mask(d, pos, ku_mask, kind, margin)
    return [Triplet(int(a), int(p), int(n)) for a, p, n in np.argwhere(found)]


def _batches(n_kk, n_ku, batch_size, rng):
    """Yield (kk_idx, ku_idx) pairs covering every KK sample once per epoch."""
    kk_per = int(round(batch_size * n_kk / (n_kk + n_ku)))
    kk_per = min(max(kk_per, 2), max(batch_size - 1, 2))
    ku_per = max(batch_size - kk_per, 1)
    n_batches = max(1, n_kk // kk_per)
    kk_parts = np.array_split(rng.permutation(n_kk), n_batches)
    reps = math.ceil(n_batches * ku_per / n_ku)
    ku_stream = np.concatenate([rng.permutation(n_ku) for _ in range(reps)])
    for i, part in enumerate(kk_parts):
        yield part, ku_stream[i * ku_per : (i + 1) * ku_per]


def train_embedding(
    train_KK: Dataset,
    train_KU: Dataset,
    model_init: EmbeddingModel,
    loss_cfg: TripletLossConfig,
    train_cfg: TrainConfig,
    telemetry: Optional[list] = None,
) -> EmbeddingModel:
    """Train a copy of ``model_init``; ``model_init`` itself is left untouched.

    Each batch mixes KK and KU samples in proportion to the split sizes.
    Triplets are mined on detached embeddings, then the loss is recomputed
    with gradients. One :class:`EpochStats` per epoch (mean batch loss,
    total mined triplets) is appended to ``telemetry`` when given.
    """
    if len(train_KU) == 0:
        raise ConfigurationError("train_KU is empty: the embedding needs known unknowns")
    if len(train_KK) < 2:
        raise ConfigurationError("train_KK needs at least 2 samples")
    if train_cfg.epochs == 0:
        return model_init

    model = copy.deepcopy(model_init)
    model.train()
    opt = sgd(model, train_cfg)
    rng = np.random.default_rng(train_cfg.seed)
    x_kk, _ = model.as_input(train_KK.features)
    x_ku, _ = model.as_input(train_KU.features)

    for epoch in range(train_cfg.epochs):
        losses, n_triplets = [], 0
        for kk_idx, ku_idx in _batches(len(x_kk), len(x_ku), train_cfg.batch_size, rng):
            x = torch.cat([x_kk[kk_idx], x_ku[ku_idx]])
            roles = [Role.KK.value] * len(kk_idx) + [Role.KU.value] * len(ku_idx)
            emb = model(x)
            if not torch.isfinite(emb).all():
                raise TrainingError(f"non-finite embeddings at epoch {epoch}", epoch)
            triplets = mine_triplets(
                emb.detach().numpy(), roles, loss_cfg.mining_strategy, loss_cfg.margin,
                loss_cfg.positive_selection, loss_cfg.combined_mode, rng,
            )
            opt.zero_grad()
            if triplets:
                loss = triplet_loss(emb, triplets, loss_cfg.margin)
                if not torch.isfinite(loss):
                    raise TrainingError(f"non-finite triplet loss at epoch {epoch}", epoch)
                loss.backward()
                losses.append(loss.item())
                n_triplets += len(triplets)
            else:
                losses.append(0.0)
            # stepping on triplet-free batches keeps the L2 penalty acting
            opt.step()
        stats = EpochStats(epoch, float(np.mean(losses)), n_triplets)
        logger.debug("embedding epoch %d loss %.6f triplets %d", epoch, stats.mean_loss, n_triplets)
        if telemetry is not None:
            telemetry.append(stats)
    model.eval()
    return model
