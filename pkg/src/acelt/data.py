"""Long-tailed dataset synthesis, sampling and mixup."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import ConfigurationError, ContractError
from .planner import ClassProfile

MANY, MEDIUM, FEW = "many", "medium", "few"
SPLIT_NAMES = (MANY, MEDIUM, FEW)


# ---------------------------------------------------------------- profiles


def exponential_profile(n_max: int, imbalance_factor: float, num_classes: int) -> ClassProfile:
    """Counts decaying geometrically from ``n_max`` down to ``n_max / imbalance_factor``.

    Category ``i`` (1-based) gets ``round(n_max * mu**(i-1))`` samples with
    ``mu = imbalance_factor ** (-1 / (C - 1))``; counts are clamped to 1.
    """
    if n_max < 1 or imbalance_factor < 1 or num_classes < 2:
        raise ConfigurationError("need n_max >= 1, imbalance_factor >= 1 and C >= 2")
    mu = imbalance_factor ** (-1.0 / (num_classes - 1))
    counts = [round(n_max * mu**i) for i in range(num_classes)]
    if counts[-1] < 1:
        warnings.warn(
            f"n_max={n_max} with imbalance factor {imbalance_factor} rounds tail counts "
            "to zero; clamping to 1",
            stacklevel=2,
        )
    return ClassProfile(tuple(max(1, n) for n in counts))


def pareto_profile(
    n_max: int, n_min: Optional[int], num_classes: int, power: float = 6.0
) -> ClassProfile:
    """Power-law (rank-size) counts ``round(n_max * i**-gamma)``.

    With ``n_min`` given, ``gamma = log(n_max / n_min) / log(C)`` so both
    endpoints are hit exactly.  Without it, gamma is the rank-size exponent
    ``1 / power`` of a Pareto law with shape ``power``.
    """
    if n_max < 1 or num_classes < 1:
        raise ConfigurationError("need n_max >= 1 and C >= 1")
    if n_min is None:
        if power <= 0:
            raise ConfigurationError("power must be positive")
        gamma = 1.0 / power
    else:
        if n_min < 1 or n_min > n_max:
            raise ConfigurationError(f"need 1 <= n_min <= n_max, got {n_min} > {n_max}")
        if num_classes == 1:
            if n_min != n_max:
                raise ConfigurationError("a single category cannot have two endpoints")
            return ClassProfile((n_max,))
        gamma = math.log(n_max / n_min) / math.log(num_classes)
    counts = [max(1, round(n_max * i**-gamma)) for i in range(1, num_classes + 1)]
    if n_min is not None:
        counts[-1] = n_min
    return ClassProfile(tuple(counts))


def imbalance_factor(profile: ClassProfile) -> float:
    return profile.counts[0] / profile.counts[-1]


@dataclass(frozen=True)
class FrequencySplits:
    many_threshold: int
    few_threshold: int
    membership: tuple[str, ...]  # tag of each 1-based category, index c - 1

    def categories(self, split: str) -> list[int]:
        return [c + 1 for c, tag in enumerate(self.membership) if tag == split]


def frequency_splits(
    profile: ClassProfile, many_threshold: int = 100, few_threshold: int = 20
) -> FrequencySplits:
    """Tag categories many (> many_threshold), few (< few_threshold) or medium."""
    if not many_threshold > few_threshold >= 1:
        raise ConfigurationError("need many_threshold > few_threshold >= 1")

    def tag(n: int) -> str:
        if n > many_threshold:
            return MANY
        if n < few_threshold:
            return FEW
        return MEDIUM

    return FrequencySplits(many_threshold, few_threshold, tuple(tag(n) for n in profile.counts))


def save_profile(profile: ClassProfile, path) -> None:
    Path(path).write_text(json.dumps(list(profile.counts)) + "\n")


def load_profile(path) -> ClassProfile:
    return ClassProfile(tuple(json.loads(Path(path).read_text())))


# ---------------------------------------------------------------- datasets


@dataclass(frozen=True)
class Dataset:
    """Feature rows with 1-based labels ordered by descending training count.

    ``profile`` always describes the *training* distribution, also on the
    test split, so evaluation can derive frequency splits from it.
    ``label_names`` maps category id ``c`` to the original label at ``c - 1``.
    """

    features: np.ndarray
    labels: np.ndarray
    profile: ClassProfile
    split: str = "train"
    label_names: tuple = field(default=())

    def __post_init__(self):
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise ConfigurationError("features must be N x d with one label per row")
        if self.split not in ("train", "test"):
            raise ConfigurationError(f"unknown split {self.split!r}")
        if len(self.labels) and (
            self.labels.min() < 1 or self.labels.max() > self.profile.num_classes
        ):
            raise ConfigurationError("labels must lie in 1..C")
        if not self.label_names:
            object.__setattr__(
                self, "label_names", tuple(range(1, self.profile.num_classes + 1))
            )

    @property
    def num_classes(self) -> int:
        return self.profile.num_classes

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return len(self.labels)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels - 1, minlength=self.num_classes)


def make_blobs(
    profile: ClassProfile,
    dim: int,
    separation: float = 1.0,
    noise: float = 0.5,
    seed: int = 0,
    test_per_class: int = 100,
) -> tuple[Dataset, Dataset]:
    """Gaussian blobs around seeded unit directions scaled by ``separation``.

    Training rows follow ``profile``; the test split is balanced.
    """
    if dim < 2:
        raise ConfigurationError("blobs need at least two feature dimensions")
    if not (separation > 0 and noise > 0):
        raise ConfigurationError("separation and noise must be positive")
    rng = np.random.default_rng(seed)
    directions = rng.standard_normal((profile.num_classes, dim))
    means = separation * directions / np.linalg.norm(directions, axis=1, keepdims=True)

    def draw(counts) -> tuple[np.ndarray, np.ndarray]:
        labels = np.repeat(np.arange(1, profile.num_classes + 1), counts)
        x = means[labels - 1] + noise * rng.standard_normal((labels.size, dim))
        return x, labels

    x_tr, y_tr = draw(profile.counts)
    x_te, y_te = draw([test_per_class] * profile.num_classes)
    return (
        Dataset(x_tr, y_tr, profile, "train"),
        Dataset(x_te, y_te, profile, "test"),
    )


def class_means(dataset: Dataset) -> np.ndarray:
    return np.stack(
        [dataset.features[dataset.labels == c].mean(axis=0) for c in range(1, dataset.num_classes + 1)]
    )


# --------------------------------------------------------------------- csv


def _read_rows(path) -> tuple[np.ndarray, list]:
    feats, raw_labels = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or row[0].startswith("#"):
                continue
            try:
                feats.append([float(v) for v in row[:-1]])
                raw_labels.append(int(row[-1]))
            except ValueError:
                if lineno == 1:  # header
                    continue
                raise ConfigurationError(f"{path}:{lineno}: non-numeric field") from None
    if not feats:
        raise ConfigurationError(f"{path} holds no data rows")
    if len({len(f) for f in feats}) != 1:
        raise ConfigurationError(f"{path}: rows have differing widths")
    return np.asarray(feats, dtype=np.float64), raw_labels


def read_csv_dataset(train_path, test_path=None) -> tuple[Dataset, Optional[Dataset]]:
    """Load ``features..., label`` CSV files.

    Categories are re-indexed by descending training count (ties broken by
    the original label) and the original labels are kept in ``label_names``.
    """
    x_tr, raw_tr = _read_rows(train_path)
    names, counts = np.unique(np.asarray(raw_tr), return_counts=True)
    order = sorted(range(len(names)), key=lambda k: (-counts[k], names[k]))
    label_names = tuple(int(names[k]) for k in order)
    index = {name: c + 1 for c, name in enumerate(label_names)}
    profile = ClassProfile(tuple(int(counts[k]) for k in order))
    train = Dataset(
        x_tr, np.array([index[v] for v in raw_tr]), profile, "train", label_names
    )
    test = None
    if test_path is not None:
        x_te, raw_te = _read_rows(test_path)
        unknown = set(raw_te) - set(index)
        if unknown:
            raise ConfigurationError(f"test labels {sorted(unknown)} absent from training data")
        if x_te.shape[1] != x_tr.shape[1]:
            raise ConfigurationError("train and test feature widths differ")
        test = Dataset(x_te, np.array([index[v] for v in raw_te]), profile, "test", label_names)
    return train, test


def write_csv_dataset(dataset: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for x, y in zip(dataset.features, dataset.labels):
            w.writerow([repr(float(v)) for v in x] + [dataset.label_names[y - 1]])


# ---------------------------------------------------------------- sampling


def epoch_batches(num_rows: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Index arrays covering one random permutation of the rows, in order."""
    if not 1 <= batch_size:
        raise ConfigurationError("batch_size must be positive")
    perm = rng.permutation(num_rows)
    for start in range(0, num_rows, batch_size):
        yield perm[start : start + batch_size]


def sample_batch(
    dataset: Dataset, batch_size: int, rng: np.random.Generator
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Endless stream of instance-uniform batches, one permutation per epoch."""
    if batch_size > len(dataset):
        raise ConfigurationError("batch_size exceeds the dataset size")
    while True:
        for idx in epoch_batches(len(dataset), batch_size, rng):
            yield dataset.features[idx], dataset.labels[idx]


# ------------------------------------------------------------------- mixup


@dataclass(frozen=True)
class MixedBatch:
    features: np.ndarray
    labels_a: np.ndarray
    labels_b: np.ndarray
    lam: float

    def targets(self, num_classes: int, rows=None, first_target: int = 1) -> np.ndarray:
        """Soft target rows; mass on categories below ``first_target`` is dropped
        and the remainder renormalised."""
        a, b = self.labels_a, self.labels_b
        if rows is not None:
            a, b = a[rows], b[rows]
        t = soft_targets(a, b, self.lam, num_classes)
        if first_target > 1:
            t[:, : first_target - 1] = 0.0
            mass = t.sum(axis=1, keepdims=True)
            if np.any(mass <= 0.0):
                raise ContractError(f"row has no target mass at or above category {first_target}")
            t /= mass
        return t

    def dominant_labels(self) -> np.ndarray:
        return self.labels_a if self.lam >= 0.5 else self.labels_b


def mix(x_a: np.ndarray, x_b: np.ndarray, lam: float) -> np.ndarray:
    return lam * x_a + (1.0 - lam) * x_b


def soft_targets(labels_a, labels_b, lam: float, num_classes: int) -> np.ndarray:
    """Rows ``lam * onehot(a) + (1 - lam) * onehot(b)`` over 1-based labels."""
    labels_a, labels_b = np.asarray(labels_a), np.asarray(labels_b)
    t = np.zeros((labels_a.size, num_classes))
    rows = np.arange(labels_a.size)
    t[rows, labels_a - 1] += lam
    t[rows, labels_b - 1] += 1.0 - lam
    return t


def mixup(features: np.ndarray, labels: np.ndarray, alpha: float, rng: np.random.Generator) -> MixedBatch:
    """Mix each row with a partner from a random in-batch permutation.

    ``alpha == 0`` disables mixing and returns the batch unchanged.
    """
    if alpha < 0:
        raise ContractError("mixup alpha must be non-negative")
    labels = np.asarray(labels)
    if alpha == 0:
        return MixedBatch(features, labels, labels, 1.0)
    lam = float(rng.beta(alpha, alpha))
    perm = rng.permutation(len(labels))
    return MixedBatch(mix(features, features[perm], lam), labels, labels[perm], lam)
