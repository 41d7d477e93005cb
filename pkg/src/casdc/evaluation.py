"""Open-set metrics: AUROC, CCR at a TPR operating point, CCR curves, baselines, projections.

Score orientation: a larger score means "more known". For the cascade the
score is the squared distance to the known-unknown prototype.

CCR counts a known test sample as correct only if it is accepted
(``score > tau``) *and* classified correctly; the denominator is every known
test sample, so rejected knowns are failures. ``accepted_only=True`` switches
to the accepted-knowns denominator.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .classifier import ClassifierModel, logits_of
from .discriminator import calibrate_threshold
from .errors import UndefinedMetricError


@dataclass(frozen=True)
class EvalRecord:
    score: float
    is_known: bool
    true_class: Optional[int] = None
    predicted_class: Optional[int] = None

    def __post_init__(self):
        if (self.true_class is not None) != bool(self.is_known):
            raise ValueError("true_class must be present exactly for known records")


@dataclass(frozen=True)
class CCRCurve:
    points: tuple

    def __post_init__(self):
        tprs = [p[0] for p in self.points]
        if any(b <= a for a, b in zip(tprs, tprs[1:])):
            raise ValueError("tpr values must be strictly increasing")

    @property
    def tpr(self) -> np.ndarray:
        return np.array([p[0] for p in self.points])

    @property
    def ccr(self) -> np.ndarray:
        return np.array([p[1] for p in self.points])


def make_records(scores, is_known, true_class, predicted_class) -> list:
    return [
        EvalRecord(float(s), bool(k), int(t) if k else None,
                   None if p is None or (isinstance(p, float) and np.isnan(p)) else int(p))
        for s, k, t, p in zip(scores, is_known, true_class, predicted_class)
    ]


def _scores(records):
    s = np.array([r.score for r in records], dtype=np.float64)
    k = np.array([r.is_known for r in records], dtype=bool)
    return s, k


def auroc(records: Sequence[EvalRecord]) -> float:
    """Mann-Whitney AUROC, knowns positive; ties earn half credit (average ranks)."""
    s, k = _scores(records)
    n_pos, n_neg = int(k.sum()), int((~k).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs at least one known and one unknown record")
    ranks = rankdata(s, method="average")
    u = ranks[k].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _known_arrays(records):
    known = [r for r in records if r.is_known]
    if not known:
        raise UndefinedMetricError("CCR needs at least one known record")
    if any(r.predicted_class is None for r in known):
        raise ValueError("every known record needs a predicted_class")
    s = np.array([r.score for r in known], dtype=np.float64)
    correct = np.array([r.predicted_class == r.true_class for r in known])
    return s, correct


def ccr_at_tpr(records, target_tpr: float, floor: float = 0.0, accepted_only: bool = False) -> float:
    """Correct classification rate at the threshold giving ``target_tpr`` on known scores."""
    s, correct = _known_arrays(records)
    tau = calibrate_threshold(s, target_tpr, floor=floor)
    accepted = s > tau
    hits = int((accepted & correct).sum())
    if accepted_only:
        return hits / int(accepted.sum()) if accepted.any() else 0.0
    return hits / len(s)


def ccr_curve(records, tpr_grid, floor: float = 0.0, accepted_only: bool = False) -> CCRCurve:
    grid = [float(t) for t in tpr_grid]
    if any(not 0 < t <= 1 for t in grid):
        raise ValueError("tpr grid values must lie in (0, 1]")
    return CCRCurve(tuple((t, ccr_at_tpr(records, t, floor, accepted_only)) for t in grid))


def closed_set_accuracy(records) -> float:
    _, correct = _known_arrays(records)
    return float(correct.mean())


def _softmax(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def max_logit_scores(logits) -> np.ndarray:
    return np.asarray(logits, dtype=np.float64).max(axis=-1)


def max_softmax_scores(logits) -> np.ndarray:
    return _softmax(logits).max(axis=-1)


def baseline_max_logit(f: ClassifierModel, x, variant: str = "logit") -> np.ndarray:
    """Single-function baseline scores: maximum logit, or maximum softmax probability."""
    logits = logits_of(f, x)
    if variant == "logit":
        return max_logit_scores(logits)
    if variant == "softmax":
        return max_softmax_scores(logits)
    raise ValueError("variant must be 'logit' or 'softmax'")


@dataclass(frozen=True)
class Projection:
    points: list  # (x, y, tag)
    method: str
    explained_variance: tuple = ()


def project_2d(embeddings, labels) -> Projection:
    """Deterministic principal-component projection to two dimensions.

    Inputs that are already at most 2-D are only centered. Component signs
    are fixed so the largest-magnitude loading of each axis is positive.
    """
    z = np.asarray(embeddings, dtype=np.float64)
    labels = list(labels)
    if z.ndim != 2 or len(z) < 3:
        raise ValueError("need at least 3 embeddings of shape (n, d)")
    if len(labels) != len(z):
        raise ValueError("one label per embedding required")
    zc = z - z.mean(axis=0)
    if z.shape[1] <= 2:
        xy = np.zeros((len(z), 2))
        xy[:, : z.shape[1]] = zc
        return Projection([(float(a), float(b), t) for (a, b), t in zip(xy, labels)], "centered")
    _, sv, vt = np.linalg.svd(zc, full_matrices=False)
    comps = vt[:2]
    signs = np.sign(comps[np.arange(2), np.abs(comps).argmax(axis=1)])
    comps = comps * signs[:, None]
    xy = zc @ comps.T
    var = sv**2 / max(len(z) - 1, 1)
    return Projection(
        [(float(a), float(b), t) for (a, b), t in zip(xy, labels)],
        "pca",
        tuple(float(v) for v in var[:2]),
    )


# ---------------------------------------------------------------------------
# persistence


def write_metrics_json(path, metrics: dict, config_hash: str, calibration_mode: str, extra=None):
    rows = [
        {"metric": name, "value": value, "config_hash": config_hash,
         "calibration_mode": calibration_mode, **(extra or {})}
        for name, value in metrics.items()
    ]
    Path(path).write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")


def write_curve_csv(path, curve: CCRCurve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tpr", "ccr"])
        for t, c in curve.points:
            w.writerow([repr(t), repr(c)])


def read_curve_csv(path) -> CCRCurve:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return CCRCurve(tuple((float(r["tpr"]), float(r["ccr"])) for r in rows))


def write_projection_csv(path, proj: Projection) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "tag", "method"])
        for x, y, tag in proj.points:
            w.writerow([repr(x), repr(y), tag, proj.method])


def read_projection_csv(path) -> Projection:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    method = rows[0]["method"] if rows else "pca"
    return Projection([(float(r["x"]), float(r["y"]), r["tag"]) for r in rows], method)
