"""Pipeline stages: split -> train -> calibrate -> eval.

Each stage reads its inputs from and writes its outputs to a per-seed run
directory, so the CLI can run stages one by one and ``run_single`` simply
chains them. Artifacts in a run directory:

================================  ==========================================
``partition.json``                class roles
``embedding.pt`` / ``classifier.pt``  model checkpoints
``embedding_telemetry.csv``       epoch, mean_loss, mined_triplet_count
``classifier_telemetry.csv``      epoch, mean_loss, samples
``prototypes.json``               mu_KK, mu_KU
``threshold.json``                tau, calibration mode, target / achieved TPR
``metrics.json`` / ``metrics.csv``  metric values for this seed
``curve.csv``                     CCR vs TPR
``projection.csv``                2-D embedding projection
================================  ==========================================
"""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import numpy as np
import torch

from ..classifier import ClassifierModel, classify, train_classifier
from ..dataset import ClassPartition, Dataset, Role, generate_synthetic, load_dataset, make_partition, split_dataset
from ..discriminator import (
    KNOWN,
    ThresholdPolicy,
    achieved_tpr,
    calibrate_threshold,
    compute_prototypes,
    distance_score,
    Prototypes,
    predict_cascade,
)
from ..embedding import EmbeddingModel, embed, train_embedding
from ..errors import StageError
from ..evaluation import (
    auroc,
    ccr_at_tpr,
    ccr_curve,
    closed_set_accuracy,
    make_records,
    max_logit_scores,
    max_softmax_scores,
    project_2d,
    write_curve_csv,
    write_metrics_json,
    write_projection_csv,
)
from ..training import deterministic, write_telemetry
from .config import ExperimentConfig

logger = logging.getLogger(__name__)


def run_dir_for(cfg: ExperimentConfig, seed: int, base=None) -> Path:
    return Path(base or cfg.output_dir) / f"seed_{seed}"


def load_source(cfg: ExperimentConfig) -> Dataset:
    ds = cfg.dataset
    if ds.source == "synthetic":
        s = ds.synthetic
        return generate_synthetic(
            s.n_classes, s.samples_per_class, s.dim, s.class_separation, s.seed, s.test_fraction
        )
    return load_dataset(ds.path, ds.source, ds.normalization)


def partition_seed(cfg: ExperimentConfig, seed: int) -> int:
    p = cfg.dataset.partition
    return seed if p.seed_policy == "per_run" else p.seed


def holdout_mask(n: int, fraction: float, seed: int) -> np.ndarray:
    """Deterministic calibration hold-out over the known training samples."""
    rng = np.random.default_rng([seed, 7919])
    k = int(round(fraction * n))
    mask = np.zeros(n, dtype=bool)
    mask[rng.permutation(n)[:k]] = True
    return mask


def splits(cfg: ExperimentConfig, seed: int, run_dir: Path):
    """Return (train_KK, train_KU, test_T, holdout_KK) for a split run directory."""
    partition = ClassPartition.load(run_dir / "partition.json")
    train_kk, train_ku, test_t = split_dataset(load_source(cfg), partition)
    holdout = None
    if cfg.threshold.mode == "target_tpr_on_holdout":
        mask = holdout_mask(len(train_kk), cfg.threshold.holdout_fraction, seed)
        holdout = train_kk.subset(mask)
        train_kk = train_kk.subset(~mask)
    return train_kk, train_ku, test_t, holdout


def _stage(name):
    def wrap(fn):
        def inner(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except StageError:
                raise
            except Exception as exc:
                raise StageError(name, exc) from exc
        inner.__name__ = fn.__name__
        inner.__doc__ = fn.__doc__
        return inner
    return wrap


@_stage("split")
def stage_split(cfg: ExperimentConfig, seed: int, run_dir) -> ClassPartition:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    source = load_source(cfg)
    p = cfg.dataset.partition
    counts = None
    if p.fraction_mode == "sample":
        train = source.subset(source.is_train) if source.is_train is not None else source
        counts = train.class_counts()
    partition = make_partition(source.classes, p.n_known, p.ku_fraction, partition_seed(cfg, seed), counts)
    if partition.note:
        logger.warning("seed %d: %s", seed, partition.note)
    partition.save(run_dir / "partition.json")
    return partition


def _dtype(name):
    return getattr(torch, name)


def build_models(cfg: ExperimentConfig, seed: int, input_shape, known_classes):
    e, c = cfg.embedding, cfg.classifier
    g0 = EmbeddingModel(input_shape, e.embed_dim, e.architecture, e.hidden, seed, e.normalize, _dtype(e.dtype))
    f0 = ClassifierModel(input_shape, known_classes, c.architecture, c.hidden, seed, _dtype(c.dtype))
    return g0, f0


def stage_train(cfg: ExperimentConfig, seed: int, run_dir):
    """Train g and f; telemetry gathered so far is written even when a stage fails."""
    run_dir = Path(run_dir)
    try:
        train_kk, train_ku, _, _ = splits(cfg, seed, run_dir)
        g0, f0 = build_models(cfg, seed, train_kk.feature_shape, train_kk.classes)
    except Exception as exc:
        raise StageError("train", exc) from exc
    h = cfg.config_hash()

    tel = []
    try:
        g = train_embedding(train_kk, train_ku, g0, cfg.loss.to_loss_config(),
                            cfg.embedding.train.to_train_config(seed), tel)
    except Exception as exc:
        raise StageError("train_embedding", exc) from exc
    finally:
        write_telemetry(tel, run_dir / "embedding_telemetry.csv", "mined_triplet_count")
    torch.save(g.checkpoint(h), run_dir / "embedding.pt")

    tel = []
    try:
        f = train_classifier(train_kk, f0, cfg.classifier.train.to_train_config(seed), tel)
    except Exception as exc:
        raise StageError("train_classifier", exc) from exc
    finally:
        write_telemetry(tel, run_dir / "classifier_telemetry.csv", "samples")
    torch.save(f.checkpoint(h), run_dir / "classifier.pt")
    return g, f


def load_models(run_dir):
    run_dir = Path(run_dir)
    return (
        EmbeddingModel.from_checkpoint(run_dir / "embedding.pt"),
        ClassifierModel.from_checkpoint(run_dir / "classifier.pt"),
    )


@_stage("calibrate")
def stage_calibrate(cfg: ExperimentConfig, seed: int, run_dir):
    run_dir = Path(run_dir)
    train_kk, train_ku, test_t, holdout = splits(cfg, seed, run_dir)
    g, _ = load_models(run_dir)
    protos = compute_prototypes(embed(g, train_kk.features), embed(g, train_ku.features))
    protos.save(run_dir / "prototypes.json")

    t = cfg.threshold
    if t.mode == "fixed":
        policy = ThresholdPolicy(float(t.tau), "fixed")
    else:
        calib = test_t.subset(test_t.roles == Role.KK.value) if t.mode == "target_tpr_on_test" else holdout
        d = distance_score(embed(g, calib.features), protos.mu_KU)
        tau = calibrate_threshold(d, t.target_tpr)
        policy = ThresholdPolicy(tau, t.mode, t.target_tpr, achieved_tpr(d, tau))
    policy.save(run_dir / "threshold.json")
    return protos, policy


def _write_seed_metrics_csv(path, seed, metrics):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "metric", "value"])
        for k in sorted(metrics):
            w.writerow([seed, k, repr(float(metrics[k]))])


@_stage("eval")
def stage_eval(cfg: ExperimentConfig, seed: int, run_dir) -> dict:
    run_dir = Path(run_dir)
    _, _, test_t, _ = splits(cfg, seed, run_dir)
    g, f = load_models(run_dir)
    protos = Prototypes.load(run_dir / "prototypes.json")
    policy = ThresholdPolicy.load(run_dir / "threshold.json")

    z = embed(g, test_t.features)
    scores = distance_score(z, protos.mu_KU)
    is_known = test_t.roles == Role.KK.value
    # metric records need the classifier's answer for every known sample, since
    # CCR is evaluated at many thresholds
    predicted, logits = classify(f, test_t.features)
    records = make_records(scores, is_known, test_t.labels, predicted)
    accepted_only = cfg.eval.ccr_denominator == "accepted"
    target = cfg.threshold.target_tpr

    cascade = predict_cascade(test_t.features, g, protos, policy.tau, f)
    accepted = np.array([c.decision == KNOWN for c in cascade])
    correct = np.array([c.class_label == int(y) for c, y in zip(cascade, test_t.labels)])
    metrics = {
        "auroc": auroc(records),
        "ccr_at_tpr": ccr_at_tpr(records, target, accepted_only=accepted_only),
        "closed_set_accuracy": closed_set_accuracy(records),
        "tau": policy.tau,
        "cascade_tpr": float(accepted[is_known].mean()),
        "cascade_fpr": float(accepted[~is_known].mean()),
        "cascade_ccr": float((accepted & correct)[is_known].mean()),
        "prototype_separation": protos.separation,
    }
    if cfg.eval.baselines:
        for name, s, floor in (
            ("max_softmax", max_softmax_scores(logits), 0.0),
            ("max_logit", max_logit_scores(logits), -np.inf),
        ):
            recs = make_records(s, is_known, test_t.labels, predicted)
            metrics[f"baseline_{name}_auroc"] = auroc(recs)
            metrics[f"baseline_{name}_ccr_at_tpr"] = ccr_at_tpr(recs, target, floor, accepted_only)

    extra = {"seed": seed, "run_hash": cfg.run_hash(seed),
             "ccr_denominator": cfg.eval.ccr_denominator, "target_tpr": target}
    write_metrics_json(run_dir / "metrics.json", metrics, cfg.config_hash(), policy.calibration_mode, extra)
    _write_seed_metrics_csv(run_dir / "metrics.csv", seed, metrics)
    write_curve_csv(run_dir / "curve.csv", ccr_curve(records, cfg.eval.tpr_grid, accepted_only=accepted_only))

    if cfg.eval.projection:
        n = min(len(z), cfg.eval.projection_max_points)
        idx = np.sort(np.random.default_rng(seed).permutation(len(z))[:n])
        tags = [f"{r}:{int(c)}" if r == Role.KK.value else r for r, c in zip(test_t.roles, test_t.labels)]
        write_projection_csv(run_dir / "projection.csv", project_2d(z[idx], [tags[i] for i in idx]))
    return metrics


def run_single(cfg: ExperimentConfig, seed: int, run_dir=None) -> dict:
    run_dir = Path(run_dir or run_dir_for(cfg, seed))
    with deterministic(cfg.deterministic):
        stage_split(cfg, seed, run_dir)
        stage_train(cfg, seed, run_dir)
        stage_calibrate(cfg, seed, run_dir)
        metrics = stage_eval(cfg, seed, run_dir)
    (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return metrics
