"""Class partitions, split materialization, synthetic data and file loaders.

Class roles follow the open-set convention:

* ``KK`` known knowns, labelled training classes;
* ``KU`` known unknowns, a representative set of non-known classes seen in training;
* ``UU`` unknown unknowns, every non-known sample at test time.

Test samples of KU classes are relabelled ``UU``: known unknowns are a
training-time resource only.

Feature normalization
---------------------
Synthetic data is emitted as raw Gaussian coordinates (unit covariance, no
rescaling). Image data stored as ``uint8`` is scaled to [0, 1] and then
standardized channel-wise with fixed constants (``NORMALIZATION``); float data
in a container or NPZ file is taken as already normalized.
"""

from __future__ import annotations

import gzip
import json
import math
import struct
import zipfile
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import DatasetFormatError, InvalidPartitionError, MissingClassError
from .tensorio import read_tensors, write_tensors

# (mean, std) per channel applied after scaling uint8 pixels to [0, 1].
NORMALIZATION = {
    "mnist": ((0.1307,), (0.3081,)),
    "svhn": ((0.4377, 0.4438, 0.4728), (0.1980, 0.2010, 0.1970)),
    "cifar10": ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)),
    "none": (None, None),
}

FORMATS = ("casdc", "npz", "idx")


class Role(str, Enum):
    KK = "KK"
    KU = "KU"
    UU = "UU"


def round_half_up(x: float) -> int:
    # 1e-9 absorbs binary representation error (e.g. 0.1 * 5 = 0.5000000000000001)
    return int(math.floor(x + 0.5 + 1e-9))


@dataclass(frozen=True)
class ClassPartition:
    known_classes: frozenset
    known_unknown_classes: frozenset
    unknown_unknown_classes: frozenset
    seed: int
    note: Optional[str] = field(default=None, compare=False)

    def __post_init__(self):
        kk, ku, uu = self.known_classes, self.known_unknown_classes, self.unknown_unknown_classes
        if kk & ku or kk & uu or ku & uu:
            raise InvalidPartitionError("partition role sets must be pairwise disjoint")

    @property
    def all_classes(self) -> frozenset:
        return self.known_classes | self.known_unknown_classes | self.unknown_unknown_classes

    def role_of(self, class_id) -> Role:
        if class_id in self.known_classes:
            return Role.KK
        if class_id in self.known_unknown_classes:
            return Role.KU
        if class_id in self.unknown_unknown_classes:
            return Role.UU
        raise InvalidPartitionError(f"class {class_id} is not covered by the partition")

    def to_dict(self) -> dict:
        out = {
            "known": sorted(self.known_classes),
            "known_unknown": sorted(self.known_unknown_classes),
            "unknown_unknown": sorted(self.unknown_unknown_classes),
            "seed": self.seed,
        }
        if self.note:
            out["note"] = self.note
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ClassPartition":
        return cls(
            frozenset(d["known"]),
            frozenset(d["known_unknown"]),
            frozenset(d["unknown_unknown"]),
            int(d["seed"]),
            d.get("note"),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "ClassPartition":
        return cls.from_dict(json.loads(Path(path).read_text()))


def make_partition(
    all_classes: Sequence[int],
    n_known: int,
    ku_fraction: float,
    seed: int,
    sample_counts: Optional[dict] = None,
) -> ClassPartition:
    """Randomly assign classes to known / known-unknown / unknown-unknown roles.

    The number of KU classes is ``round_half_up(ku_fraction * n_unknown)``.
    If ``sample_counts`` (class id -> number of training samples) is given the
    fraction is instead measured in samples: KU takes the shortest prefix of
    the shuffled unknown classes whose sample share reaches ``ku_fraction``.
    """
    classes = sorted(set(all_classes))
    if len(classes) != len(all_classes):
        raise InvalidPartitionError("duplicate class ids")
    if not 0 < n_known < len(classes):
        raise InvalidPartitionError(
            f"n_known must satisfy 0 < n_known < {len(classes)}, got {n_known}"
        )
    if not 0.0 <= ku_fraction <= 1.0:
        raise InvalidPartitionError(f"ku_fraction must lie in [0, 1], got {ku_fraction}")

    rng = np.random.default_rng(seed)
    order = [classes[i] for i in rng.permutation(len(classes))]
    known, rest = order[:n_known], order[n_known:]

    if sample_counts is None:
        n_ku = round_half_up(ku_fraction * len(rest))
    else:
        total = sum(sample_counts[c] for c in rest)
        n_ku, acc = 0, 0
        while n_ku < len(rest) and acc < ku_fraction * total - 1e-9:
            acc += sample_counts[rest[n_ku]]
            n_ku += 1

    note = None
    if n_ku == 0 and ku_fraction > 0:
        note = f"ku_fraction={ku_fraction} rounds to 0 of {len(rest)} unknown classes"
    return ClassPartition(
        frozenset(known), frozenset(rest[:n_ku]), frozenset(rest[n_ku:]), seed, note
    )


@dataclass(frozen=True)
class LabeledSample:
    features: np.ndarray
    class_label: int
    role: Optional[Role]


def _readonly(a):
    v = np.asarray(a).view()
    v.flags.writeable = False
    return v


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable array-backed dataset.

    ``roles`` is None for raw sources that have not been split yet;
    ``is_train`` is None when the source carries no train/test designation.
    """

    features: np.ndarray
    labels: np.ndarray
    roles: Optional[np.ndarray] = None
    is_train: Optional[np.ndarray] = None

    def __post_init__(self):
        n = len(self.features)
        if len(self.labels) != n:
            raise DatasetFormatError(f"{n} feature rows but {len(self.labels)} labels")
        for name in ("roles", "is_train"):
            arr = getattr(self, name)
            if arr is not None and len(arr) != n:
                raise DatasetFormatError(f"{name} has length {len(arr)}, expected {n}")
        object.__setattr__(self, "features", _readonly(self.features))
        object.__setattr__(self, "labels", _readonly(np.asarray(self.labels, dtype=np.int64)))
        if self.roles is not None:
            object.__setattr__(self, "roles", _readonly(np.asarray(self.roles, dtype="<U2")))
        if self.is_train is not None:
            object.__setattr__(self, "is_train", _readonly(np.asarray(self.is_train, dtype=bool)))

    def __len__(self):
        return len(self.labels)

    def __iter__(self) -> Iterator[LabeledSample]:
        return iter(self.samples)

    @property
    def samples(self) -> list:
        roles = self.roles if self.roles is not None else [None] * len(self)
        return [
            LabeledSample(self.features[i], int(self.labels[i]), Role(r) if r else None)
            for i, r in enumerate(roles)
        ]

    @property
    def feature_shape(self) -> tuple:
        return tuple(self.features.shape[1:])

    @property
    def classes(self) -> list:
        return sorted(int(c) for c in np.unique(self.labels))

    @property
    def class_count(self) -> int:
        return len(self.classes)

    def subset(self, mask_or_idx, roles=None) -> "Dataset":
        return Dataset(
            self.features[mask_or_idx],
            self.labels[mask_or_idx],
            roles if roles is not None else (None if self.roles is None else self.roles[mask_or_idx]),
            None if self.is_train is None else self.is_train[mask_or_idx],
        )

    def class_counts(self) -> dict:
        vals, counts = np.unique(self.labels, return_counts=True)
        return {int(v): int(c) for v, c in zip(vals, counts)}


def split_dataset(source: Dataset, partition: ClassPartition, test: Optional[Dataset] = None):
    """Materialize ``(train_KK, train_KU, test_T)``.

    Either ``source`` carries ``is_train`` flags or a separate ``test`` source is
    passed. ``test_T`` holds known-class test samples as ``KK`` and every other
    test sample as ``UU``.
    """
    if test is None:
        if source.is_train is None:
            raise DatasetFormatError("source has no train/test designation and no test source given")
        train = source.subset(source.is_train)
        test = source.subset(~source.is_train)
    else:
        train = source

    present = set(train.classes) | set(test.classes)
    missing = sorted(partition.all_classes - present)
    if missing:
        raise MissingClassError(f"partition classes absent from source: {missing}")
    uncovered = sorted(present - partition.all_classes)
    if uncovered:
        raise InvalidPartitionError(f"source classes not covered by partition: {uncovered}")

    known = np.isin(train.labels, sorted(partition.known_classes))
    ku = np.isin(train.labels, sorted(partition.known_unknown_classes))
    train_kk = train.subset(known, roles=np.full(int(known.sum()), Role.KK.value))
    train_ku = train.subset(ku, roles=np.full(int(ku.sum()), Role.KU.value))

    test_known = np.isin(test.labels, sorted(partition.known_classes))
    roles = np.where(test_known, Role.KK.value, Role.UU.value)
    test_t = test.subset(np.ones(len(test), dtype=bool), roles=roles)
    return train_kk, train_ku, test_t


def _class_means(n_classes, dim, sep, rng):
    if n_classes <= dim:
        # Scaled orthonormal directions: every pairwise distance equals sep exactly.
        q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
        q = q * np.sign(np.diag(r))
        return q[:, :n_classes].T * (sep / math.sqrt(2.0) * (1 + 1e-9))
    scale = sep
    while True:
        for _ in range(200):
            means = rng.standard_normal((n_classes, dim)) * scale
            d2 = ((means[:, None, :] - means[None, :, :]) ** 2).sum(-1)
            d2[np.diag_indices(n_classes)] = np.inf
            if d2.min() >= sep * sep:
                return means
        scale *= 1.25


def generate_synthetic(
    n_classes: int,
    samples_per_class: int,
    dim: int,
    class_separation: float,
    seed: int,
    test_fraction: float = 0.5,
) -> Dataset:
    """Gaussian clusters with unit covariance and well separated means.

    The last ``round_half_up(test_fraction * samples_per_class)`` samples of
    each class are flagged as test data.
    """
    if dim < 2:
        raise ValueError("dim must be >= 2")
    if class_separation <= 0:
        raise ValueError("class_separation must be positive")
    if n_classes < 1 or samples_per_class < 1:
        raise ValueError("n_classes and samples_per_class must be positive")
    if not 0.0 <= test_fraction < 1.0:
        raise ValueError("test_fraction must lie in [0, 1)")

    rng = np.random.default_rng(seed)
    means = _class_means(n_classes, dim, class_separation, rng)
    noise = rng.standard_normal((n_classes, samples_per_class, dim))
    features = (means[:, None, :] + noise).reshape(-1, dim)
    labels = np.repeat(np.arange(n_classes), samples_per_class)
    n_test = round_half_up(test_fraction * samples_per_class)
    per_class = np.arange(samples_per_class) < samples_per_class - n_test
    return Dataset(features, labels, is_train=np.tile(per_class, n_classes))


def class_means_of(dataset: Dataset) -> dict:
    return {c: dataset.features[dataset.labels == c].mean(axis=0) for c in dataset.classes}


# ---------------------------------------------------------------------------
# file formats


def save_dataset(dataset: Dataset, path) -> None:
    tensors = {
        "features": np.asarray(dataset.features),
        "labels": np.asarray(dataset.labels, dtype=np.int64),
    }
    if dataset.is_train is not None:
        tensors["is_train"] = np.asarray(dataset.is_train, dtype=np.uint8)
    if dataset.roles is not None:
        codes = {r.value: i for i, r in enumerate(Role)}
        tensors["roles"] = np.array([codes[r] for r in dataset.roles], dtype=np.uint8)
    write_tensors(path, tensors)


def _normalize_images(x: np.ndarray, normalization: str) -> np.ndarray:
    x = x.astype(np.float32) / 255.0
    mean, std = NORMALIZATION[normalization]
    if mean is None:
        return x
    if x.ndim == 3:
        x = x[:, None]
    if x.shape[1] != len(mean):
        raise DatasetFormatError(
            f"{normalization} normalization expects {len(mean)} channels, got {x.shape[1]}"
        )
    m = np.asarray(mean, dtype=np.float32).reshape(1, -1, 1, 1)
    s = np.asarray(std, dtype=np.float32).reshape(1, -1, 1, 1)
    return (x - m) / s


def _from_arrays(t: dict, path, normalization) -> Dataset:
    if "features" not in t or "labels" not in t:
        raise DatasetFormatError(f"{path}: expected 'features' and 'labels' tensors")
    features = t["features"]
    if features.dtype == np.uint8:
        features = _normalize_images(features, normalization)
    roles = None
    if "roles" in t:
        names = [r.value for r in Role]
        roles = np.array([names[int(c)] for c in t["roles"]])
    is_train = t["is_train"].astype(bool) if "is_train" in t else None
    return Dataset(features, t["labels"].astype(np.int64), roles, is_train)


_IDX_DTYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path) -> np.ndarray:
    """Read one IDX file (optionally gzip-compressed)."""
    path = Path(path)
    try:
        raw = gzip.decompress(path.read_bytes()) if path.suffix == ".gz" else path.read_bytes()
    except (OSError, EOFError) as exc:
        raise DatasetFormatError(f"{path}: {exc}") from exc
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise DatasetFormatError(f"{path}: not an IDX file")
    code, ndim = raw[2], raw[3]
    if code not in _IDX_DTYPES:
        raise DatasetFormatError(f"{path}: unknown IDX type code {code:#x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DatasetFormatError(f"{path}: truncated IDX header")
    shape = struct.unpack(f">{ndim}I", raw[4:header])
    dt = np.dtype(_IDX_DTYPES[code])
    expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(raw) - header != expected:
        raise DatasetFormatError(
            f"{path}: payload is {len(raw) - header} bytes, shape {shape} needs {expected}"
        )
    return np.frombuffer(raw, dtype=dt, offset=header).reshape(shape).astype(dt.newbyteorder("="))


def _find(directory: Path, stem: str) -> Path:
    for cand in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        if (directory / cand).exists():
            return directory / cand
    raise FileNotFoundError(f"{directory}: no {stem}[.gz]")


def _load_idx_dir(directory: Path, normalization: str) -> Dataset:
    parts = []
    for prefix, train in (("train", True), ("t10k", False)):
        images = read_idx(_find(directory, f"{prefix}-images-idx3-ubyte"))
        labels = read_idx(_find(directory, f"{prefix}-labels-idx1-ubyte"))
        if len(images) != len(labels):
            raise DatasetFormatError(f"{directory}: {len(images)} {prefix} images vs {len(labels)} labels")
        parts.append((images, labels, np.full(len(labels), train)))
    images = np.concatenate([p[0] for p in parts])
    return Dataset(
        _normalize_images(images, normalization),
        np.concatenate([p[1] for p in parts]).astype(np.int64),
        is_train=np.concatenate([p[2] for p in parts]),
    )


def load_dataset(path, format: str, normalization: str = "mnist") -> Dataset:
    """Load a dataset from disk.

    Formats:

    ``casdc``
        The package's tensor container (see :mod:`casdc.tensorio`) with
        ``features``, ``labels`` and optional ``is_train`` / ``roles`` tensors.
    ``npz``
        A NumPy archive holding the same arrays.
    ``idx``
        A directory with the four standard MNIST-style IDX files
        (``train-images-idx3-ubyte`` etc., optionally ``.gz``); images become
        ``1 x H x W`` float arrays.

    ``uint8`` features are scaled to [0, 1] and standardized with the
    ``normalization`` constants.
    """
    path = Path(path)
    if format not in FORMATS:
        raise ValueError(f"unknown format {format!r}; expected one of {FORMATS}")
    if not path.exists():
        raise FileNotFoundError(path)
    if format == "idx":
        return _load_idx_dir(path, normalization)
    if format == "npz":
        try:
            with np.load(path, allow_pickle=False) as z:
                arrays = {k: z[k] for k in z.files}
        except (ValueError, OSError, EOFError, zipfile.BadZipFile) as exc:
            raise DatasetFormatError(f"{path}: {exc}") from exc
        return _from_arrays(arrays, path, normalization)
    return _from_arrays(read_tensors(path), path, normalization)
