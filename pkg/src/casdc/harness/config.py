"""Experiment configuration: nested dataclasses loaded from a YAML file.

Every field has a default, so an empty file is a valid config (the desk-scale
synthetic experiment). Unknown keys are rejected. ``CASDC_OUTPUT_DIR`` and
``CASDC_JOBS`` override ``output_dir`` and ``jobs``; nothing else is read from
the environment.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from ..discriminator import CALIBRATION_MODES
from ..embedding import TripletLossConfig
from ..errors import ConfigurationError
from ..training import TrainConfig

DEFAULT_TPR_GRID = tuple(round(0.05 * i, 2) for i in range(1, 21))


@dataclass
class SyntheticSpec:
    n_classes: int = 10
    samples_per_class: int = 200
    dim: int = 10
    class_separation: float = 10.0
    test_fraction: float = 0.5
    seed: int = 100


@dataclass
class PartitionSpec:
    n_known: int = 6
    ku_fraction: float = 0.5
    fraction_mode: str = "class"  # class | sample
    seed_policy: str = "per_run"  # per_run: partition seed = run seed; fixed: use `seed`
    seed: int = 0


@dataclass
class DatasetSpec:
    source: str = "synthetic"  # synthetic | casdc | npz | idx
    path: Optional[str] = None
    normalization: str = "mnist"
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    partition: PartitionSpec = field(default_factory=PartitionSpec)


@dataclass
class TrainSpec:
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 0.05
    weight_decay: float = 5e-4
    momentum: float = 0.9

    def to_train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(seed=seed, **dataclasses.asdict(self))


@dataclass
class EmbeddingSpec:
    architecture: str = "mlp2"
    embed_dim: int = 128
    hidden: int = 128
    normalize: bool = True
    dtype: str = "float64"
    train: TrainSpec = field(default_factory=TrainSpec)


@dataclass
class ClassifierSpec:
    architecture: str = "mlp2"
    hidden: int = 128
    dtype: str = "float64"
    train: TrainSpec = field(default_factory=lambda: TrainSpec(learning_rate=0.01))


@dataclass
class LossSpec:
    margin: float = 0.1
    mining_strategy: str = "combined"
    positive_selection: Optional[str] = None
    combined_mode: str = "union"

    def to_loss_config(self) -> TripletLossConfig:
        return TripletLossConfig(**dataclasses.asdict(self))


@dataclass
class ThresholdSpec:
    mode: str = "target_tpr_on_test"
    target_tpr: float = 0.95
    tau: Optional[float] = None  # only for mode "fixed"
    holdout_fraction: float = 0.1  # only for mode "target_tpr_on_holdout"


@dataclass
class EvalSpec:
    tpr_grid: list = field(default_factory=lambda: list(DEFAULT_TPR_GRID))
    ccr_denominator: str = "all"  # all | accepted
    baselines: bool = True
    projection: bool = True
    projection_max_points: int = 2000
    plots: bool = True


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    embedding: EmbeddingSpec = field(default_factory=EmbeddingSpec)
    classifier: ClassifierSpec = field(default_factory=ClassifierSpec)
    loss: LossSpec = field(default_factory=LossSpec)
    threshold: ThresholdSpec = field(default_factory=ThresholdSpec)
    eval: EvalSpec = field(default_factory=EvalSpec)
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    deterministic: bool = True
    jobs: int = 1
    output_dir: str = "runs/default"

    # fields that do not influence results and stay out of the hash
    _UNHASHED = ("output_dir", "jobs")

    def validate(self) -> "ExperimentConfig":
        if self.dataset.source not in ("synthetic", "casdc", "npz", "idx"):
            raise ConfigurationError(f"unknown dataset source {self.dataset.source!r}")
        if self.dataset.source != "synthetic" and not self.dataset.path:
            raise ConfigurationError("dataset.path is required for file sources")
        if self.dataset.partition.fraction_mode not in ("class", "sample"):
            raise ConfigurationError("partition.fraction_mode must be 'class' or 'sample'")
        if self.dataset.partition.seed_policy not in ("per_run", "fixed"):
            raise ConfigurationError("partition.seed_policy must be 'per_run' or 'fixed'")
        if self.threshold.mode not in CALIBRATION_MODES:
            raise ConfigurationError(f"threshold.mode must be one of {CALIBRATION_MODES}")
        if self.threshold.mode == "fixed" and self.threshold.tau is None:
            raise ConfigurationError("threshold.tau is required for mode 'fixed'")
        if not 0 < self.threshold.target_tpr <= 1:
            raise ConfigurationError("threshold.target_tpr must lie in (0, 1]")
        if self.eval.ccr_denominator not in ("all", "accepted"):
            raise ConfigurationError("eval.ccr_denominator must be 'all' or 'accepted'")
        grid = list(self.eval.tpr_grid)
        if any(not 0 < t <= 1 for t in grid) or any(b <= a for a, b in zip(grid, grid[1:])):
            raise ConfigurationError("eval.tpr_grid must be strictly increasing within (0, 1]")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigurationError("seeds must be a non-empty list of distinct integers")
        if self.jobs < 1:
            raise ConfigurationError("jobs must be >= 1")
        self.loss.to_loss_config()
        self.embedding.train.to_train_config(0)
        self.classifier.train.to_train_config(0)
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hashed_dict(self) -> dict:
        d = self.to_dict()
        for k in self._UNHASHED:
            d.pop(k)
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.hashed_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def run_hash(self, seed: int) -> str:
        return hashlib.sha256(f"{self.config_hash()}:{seed}".encode()).hexdigest()[:16]

    def replace(self, **dotted) -> "ExperimentConfig":
        """Copy with dotted-path overrides, e.g. ``replace(**{"loss.margin": 0.5})``."""
        d = self.to_dict()
        for path, value in dotted.items():
            node = d
            *parents, leaf = path.split(".")
            for p in parents:
                node = node[p]
            if leaf not in node:
                raise ConfigurationError(f"unknown config field {path!r}")
            node[leaf] = copy.deepcopy(value)
        return from_dict(d)

    def save(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


def _build(cls, data, where):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where or 'config'} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigurationError(f"unknown keys in {where or 'config'}: {unknown}")
    kwargs = {}
    for name, value in data.items():
        sub = _NESTED.get((cls.__name__, name))
        kwargs[name] = _build(sub, value, f"{where}.{name}".lstrip(".")) if sub else value
    return cls(**kwargs)


_NESTED = {
    ("ExperimentConfig", "dataset"): DatasetSpec,
    ("ExperimentConfig", "embedding"): EmbeddingSpec,
    ("ExperimentConfig", "classifier"): ClassifierSpec,
    ("ExperimentConfig", "loss"): LossSpec,
    ("ExperimentConfig", "threshold"): ThresholdSpec,
    ("ExperimentConfig", "eval"): EvalSpec,
    ("DatasetSpec", "synthetic"): SyntheticSpec,
    ("DatasetSpec", "partition"): PartitionSpec,
    ("EmbeddingSpec", "train"): TrainSpec,
    ("ClassifierSpec", "train"): TrainSpec,
}


def from_dict(data: Optional[dict]) -> ExperimentConfig:
    return _build(ExperimentConfig, data or {}, "").validate()


def load_config(path=None, env=None) -> ExperimentConfig:
    data = {}
    if path is not None:
        data = yaml.safe_load(Path(path).read_text()) or {}
    cfg = from_dict(data)
    env = os.environ if env is None else env
    overrides = {}
    if env.get("CASDC_OUTPUT_DIR"):
        overrides["output_dir"] = env["CASDC_OUTPUT_DIR"]
    if env.get("CASDC_JOBS"):
        overrides["jobs"] = int(env["CASDC_JOBS"])
    return cfg.replace(**overrides) if overrides else cfg
