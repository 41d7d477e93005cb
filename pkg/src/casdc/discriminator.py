"""Prototype distance discriminator and the cascaded prediction.

A test sample is declared *known* when its squared distance to the
known-unknown prototype exceeds the threshold ``tau`` and *unknown* otherwise
(``d == tau`` is unknown). Only accepted samples reach the classifier.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .classifier import ClassifierModel, classify
from .embedding import EmbeddingModel, embed
from .errors import CalibrationError, ShapeMismatchError

KNOWN = "known"
UNKNOWN = "unknown"
CALIBRATION_MODES = ("target_tpr_on_test", "target_tpr_on_holdout", "fixed")


@dataclass(frozen=True)
class Prototypes:
    mu_KK: np.ndarray
    mu_KU: np.ndarray

    @property
    def separation(self) -> float:
        """Squared distance between the two prototypes (diagnostic only)."""
        return distance_score(self.mu_KK, self.mu_KU)

    def to_dict(self) -> dict:
        return {"mu_KK": [float(v) for v in self.mu_KK], "mu_KU": [float(v) for v in self.mu_KU]}

    @classmethod
    def from_dict(cls, d) -> "Prototypes":
        return cls(np.asarray(d["mu_KK"], dtype=np.float64), np.asarray(d["mu_KU"], dtype=np.float64))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> "Prototypes":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class ThresholdPolicy:
    tau: float
    calibration_mode: str = "fixed"
    target_tpr: Optional[float] = None
    achieved_tpr: Optional[float] = None

    def __post_init__(self):
        if self.calibration_mode not in CALIBRATION_MODES:
            raise CalibrationError(f"calibration_mode must be one of {CALIBRATION_MODES}")
        if not math.isfinite(self.tau) or self.tau < 0:
            raise CalibrationError(f"tau must be finite and >= 0, got {self.tau}")
        if (self.target_tpr is None) != (self.calibration_mode == "fixed"):
            raise CalibrationError("target_tpr is required exactly when the mode is not 'fixed'")

    def to_dict(self) -> dict:
        return {"tau": self.tau, "calibration_mode": self.calibration_mode,
                "target_tpr": self.target_tpr, "achieved_tpr": self.achieved_tpr}

    @classmethod
    def from_dict(cls, d) -> "ThresholdPolicy":
        return cls(float(d["tau"]), d["calibration_mode"], d.get("target_tpr"), d.get("achieved_tpr"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> "ThresholdPolicy":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class CascadePrediction:
    decision: str
    class_label: Optional[int]
    distance: float

    def __post_init__(self):
        if (self.class_label is not None) != (self.decision == KNOWN):
            raise ValueError("class_label must be present exactly for known decisions")


def compute_prototypes(embeddings_KK, embeddings_KU) -> Prototypes:
    kk = np.asarray(embeddings_KK, dtype=np.float64)
    ku = np.asarray(embeddings_KU, dtype=np.float64)
    for name, arr in (("KK", kk), ("KU", ku)):
        if arr.ndim != 2 or len(arr) == 0:
            raise ValueError(f"no {name} embeddings to average")
    if kk.shape[1] != ku.shape[1]:
        raise ShapeMismatchError(f"embedding dims differ: {kk.shape[1]} vs {ku.shape[1]}")
    return Prototypes(kk.mean(axis=0), ku.mean(axis=0))


def distance_score(embedding, mu_KU) -> np.ndarray | float:
    """Squared Euclidean distance; accepts one embedding or a batch."""
    e = np.asarray(embedding, dtype=np.float64)
    mu = np.asarray(mu_KU, dtype=np.float64)
    if e.shape[-1] != mu.shape[-1] or mu.ndim != 1:
        raise ShapeMismatchError(f"dimension mismatch: {e.shape} vs {mu.shape}")
    d = ((e - mu) ** 2).sum(axis=-1)
    return float(d) if e.ndim == 1 else d


def _accept_count(n: int, target_tpr: float) -> int:
    # smallest count with count / n >= target_tpr; 1e-9 absorbs float error in target_tpr * n
    return int(math.ceil(target_tpr * n - 1e-9))


def calibrate_threshold(known_distances, target_tpr: float, floor: float = 0.0) -> float:
    """Largest ``tau`` such that at least ``target_tpr`` of the scores exceed it.

    With ``k = floor((1 - target_tpr) * n)``, ``tau`` is the k-th smallest
    score, stepped down past ties so the strict ``> tau`` rule keeps the
    target. When nothing may be rejected (k == 0) ``tau = floor``; for
    distances that is 0, so a score of exactly 0 stays rejected and
    the achieved rate is the best attainable. Pass ``floor=-inf`` for score
    families that can be negative.
    """
    if not 0 < target_tpr <= 1:
        raise CalibrationError(f"target_tpr must lie in (0, 1], got {target_tpr}")
    d = np.sort(np.asarray(known_distances, dtype=np.float64).ravel())
    n = len(d)
    if n == 0:
        raise CalibrationError("no known scores to calibrate on")
    k = n - _accept_count(n, target_tpr)
    while k > 0 and d[k - 1] == d[k]:
        k -= 1
    if k == 0:
        return float(floor)
    return float(d[k - 1])


def achieved_tpr(known_distances, tau: float) -> float:
    d = np.asarray(known_distances, dtype=np.float64)
    return float((d > tau).mean())


def discriminate(embedding, prototypes: Prototypes, tau: float):
    """Known iff ``distance_score(embedding, mu_KU) > tau``; vectorized for batches."""
    if tau < 0:
        raise CalibrationError("tau must be >= 0")
    d = distance_score(embedding, prototypes.mu_KU)
    if np.ndim(d) == 0:
        return KNOWN if d > tau else UNKNOWN
    return np.where(d > tau, KNOWN, UNKNOWN)


def predict_cascade(x, g: EmbeddingModel, prototypes: Prototypes, tau: float, f: ClassifierModel):
    """Embed -> discriminate -> classify the accepted samples only.

    Returns one :class:`CascadePrediction`, or a list of them when ``x`` is a
    batch.
    """
    z = embed(g, x)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    d = distance_score(z, prototypes.mu_KU)
    decisions = discriminate(z, prototypes, tau)
    accepted = np.flatnonzero(decisions == KNOWN)
    labels = {}
    if len(accepted):
        batch = np.asarray(x)[None] if single else np.asarray(x)[accepted]
        preds, _ = classify(f, batch)
        labels = dict(zip(accepted.tolist(), np.atleast_1d(preds).tolist()))
    out = [
        CascadePrediction(str(decisions[i]), labels.get(i), float(d[i])) for i in range(len(z))
    ]
    return out[0] if single else out
