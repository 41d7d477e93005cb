"""Multi-seed experiments and one-parameter ablation sweeps."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .config import ExperimentConfig, from_dict
from .pipeline import run_dir_for, run_single
from .plots import emit_plots

logger = logging.getLogger(__name__)


@dataclass
class RunReport:
    config_hash: str
    seeds: list
    per_seed: dict  # seed -> {metric: value}
    mean: dict
    std: dict  # sample std (ddof=1); None when fewer than 2 seeds
    artifacts: dict = field(default_factory=dict)
    calibration_mode: str = ""
    ccr_denominator: str = "all"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_seed"] = {str(k): v for k, v in self.per_seed.items()}
        return d

    @classmethod
    def from_dict(cls, d) -> "RunReport":
        d = dict(d)
        d["per_seed"] = {int(k): v for k, v in d["per_seed"].items()}
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def aggregate(per_seed: dict) -> tuple[dict, dict]:
    names = sorted({k for m in per_seed.values() for k in m})
    mean, std = {}, {}
    for name in names:
        vals = np.array([m[name] for m in per_seed.values() if name in m], dtype=np.float64)
        mean[name] = float(vals.mean())
        std[name] = float(vals.std(ddof=1)) if len(vals) >= 2 else None
    return mean, std


def _run_seed(args):
    cfg_dict, seed = args
    cfg = from_dict(cfg_dict)
    return seed, run_single(cfg, seed, run_dir_for(cfg, seed))


def _write_metrics_csv(path, report: RunReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "metric", "value"])
        for seed in report.seeds:
            for k in sorted(report.per_seed[seed]):
                w.writerow([seed, k, repr(float(report.per_seed[seed][k]))])
        for k in sorted(report.mean):
            w.writerow(["mean", k, repr(report.mean[k])])
            if report.std[k] is not None:
                w.writerow(["std", k, repr(report.std[k])])


def run_experiment(config: ExperimentConfig) -> RunReport:
    """Run every seed end to end and aggregate.

    Writes ``runreport.json``, ``metrics.csv`` and ``config.yaml`` to
    ``config.output_dir`` and one ``seed_<n>`` directory per seed. With
    ``jobs > 1`` seeds run in separate processes; every seed writes only to
    its own directory.
    """
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.yaml")
    jobs = [(config.to_dict(), s) for s in config.seeds]
    if config.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(config.jobs, len(jobs))) as pool:
            results = dict(pool.map(_run_seed, jobs))
    else:
        results = dict(_run_seed(j) for j in jobs)

    per_seed = {s: results[s] for s in config.seeds}
    mean, std = aggregate(per_seed)
    artifacts = {"runreport": str(out / "runreport.json"), "metrics_csv": str(out / "metrics.csv")}
    for s in config.seeds:
        d = run_dir_for(config, s)
        artifacts[f"seed_{s}"] = {
            name: str(d / name)
            for name in ("partition.json", "embedding.pt", "classifier.pt", "prototypes.json",
                         "threshold.json", "metrics.json", "curve.csv", "projection.csv")
            if (d / name).exists()
        }
        if config.eval.plots:
            artifacts[f"seed_{s}"].update({k: str(v) for k, v in emit_plots(d, d).items()})
    report = RunReport(
        config.config_hash(), list(config.seeds), per_seed, mean, std, artifacts,
        config.threshold.mode, config.eval.ccr_denominator,
    )
    _write_metrics_csv(out / "metrics.csv", report)
    (out / "runreport.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    return report


@dataclass
class SweepRow:
    value: float
    auroc_mean: Optional[float]
    auroc_std: Optional[float]
    config_hash: str
    status: str = "ok"
    error: Optional[str] = None
    report: Optional[RunReport] = None

    def pretty(self, name: str) -> str:
        if self.status != "ok":
            return f"{name}={self.value:<6g}  FAILED ({self.error})"
        std = "n/a" if self.auroc_std is None else f"{self.auroc_std:.4f}"
        return f"{name}={self.value:<6g}  {self.auroc_mean:.4f} ± {std}"


def _sweep(base: ExperimentConfig, path: str, values, label: str, out_dir=None) -> list:
    root = Path(out_dir or base.output_dir)
    rows = []
    for v in sorted(float(x) for x in values):
        cell_dir = root / f"{label}_{v:g}"
        try:
            cfg = base.replace(**{path: v, "output_dir": str(cell_dir)})
        except Exception as exc:  # invalid value for this field
            rows.append(SweepRow(v, None, None, "", "failed", str(exc)))
            continue
        try:
            rep = run_experiment(cfg)
            rows.append(SweepRow(v, rep.mean["auroc"], rep.std["auroc"], rep.config_hash, report=rep))
        except Exception as exc:
            logger.error("sweep cell %s=%g failed: %s", label, v, exc)
            rows.append(SweepRow(v, None, None, cfg.config_hash(), "failed", str(exc)))
    root.mkdir(parents=True, exist_ok=True)
    with open(root / f"sweep_{label}.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([label, "auroc_mean", "auroc_std", "config_hash", "status", "error"])
        for r in rows:
            w.writerow([repr(r.value), "" if r.auroc_mean is None else repr(r.auroc_mean),
                        "" if r.auroc_std is None else repr(r.auroc_std), r.config_hash, r.status,
                        r.error or ""])
    return rows


def sweep_beta(base_config: ExperimentConfig, beta_values, out_dir=None) -> list:
    """One experiment per margin value; rows ordered by margin."""
    for b in beta_values:
        if not float(b) > 0:
            raise ValueError(f"margin values must be positive, got {b}")
    return _sweep(base_config, "loss.margin", beta_values, "beta", out_dir)


def sweep_ku_fraction(base_config: ExperimentConfig, fractions, out_dir=None) -> list:
    """One experiment per known-unknown fraction; rows ordered by fraction."""
    for f in fractions:
        if not 0 < float(f) <= 1:
            raise ValueError(f"ku fractions must lie in (0, 1], got {f}")
    return _sweep(base_config, "dataset.partition.ku_fraction", fractions, "ku", out_dir)


def pooled_std(stds) -> float:
    vals = [s for s in stds if s is not None]
    return math.sqrt(sum(s * s for s in vals) / len(vals)) if vals else 0.0
