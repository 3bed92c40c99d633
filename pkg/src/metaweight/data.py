"""Datasets: Gaussian blobs, class imbalance, label flips, balanced splits, CSV."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .nn import Batch


class DataError(ValueError):
    pass


class CsvError(DataError):
    def __init__(self, path, line: int | None, msg: str):
        self.path = str(path)
        self.line = line
        where = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{where}: {msg}")


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int
    ids: np.ndarray | None = None
    provenance: str = "synthetic"

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if feats.ndim != 2 or labels.shape != (feats.shape[0],):
            raise DataError(f"features {feats.shape} and labels {labels.shape} disagree")
        if self.class_count < 2:
            raise DataError("class_count must be at least 2")
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            raise DataError(f"labels outside [0, {self.class_count})")
        ids = np.arange(len(labels)) if self.ids is None else np.asarray(self.ids, dtype=np.int64)
        if ids.shape != labels.shape:
            raise DataError("ids and labels disagree in length")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "ids", ids)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)

    def subset(self, index) -> Dataset:
        index = np.asarray(index, dtype=np.intp)
        return replace(self, features=self.features[index], labels=self.labels[index], ids=self.ids[index])

    def batch(self, index=None) -> Batch:
        if index is None:
            return Batch(self.features, self.labels, self.ids)
        index = np.asarray(index, dtype=np.intp)
        return Batch(self.features[index], self.labels[index], self.ids[index])


@dataclass(frozen=True)
class ImbalanceSpec:
    dominant_class: int = 0
    proportion: float = 0.6

    def __post_init__(self):
        if not 0.0 < self.proportion < 1.0:
            raise DataError("imbalance proportion must lie in (0, 1)")


@dataclass(frozen=True)
class NoiseSpec:
    flip_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.flip_rate < 1.0:
            raise DataError("flip_rate must lie in [0, 1)")


def class_means(k: int, d: int, separation: float) -> np.ndarray:
    """Pairwise distance ``separation`` (simplex corners) when k <= d, else evenly spaced on one axis."""
    means = np.zeros((k, d))
    if k <= d:
        means[np.arange(k), np.arange(k)] = separation / np.sqrt(2.0)
    else:
        means[:, 0] = separation * np.arange(k)
    return means


def synth_gaussian(k: int, per_class_count: int, d: int, separation: float, seed: int = 0) -> Dataset:
    """Unit-variance isotropic Gaussian clusters, ordered by class."""
    if k < 2 or d < 2 or not separation > 0 or per_class_count < 1:
        raise DataError(f"degenerate generator parameters k={k} d={d} separation={separation}")
    rng = np.random.default_rng(seed)
    means = class_means(k, d, separation)
    labels = np.repeat(np.arange(k), per_class_count)
    features = means[labels] + rng.standard_normal((len(labels), d))
    return Dataset(features, labels, k)


def imbalance_counts(k: int, spec: ImbalanceSpec, total: int) -> np.ndarray:
    """Class sizes for ``total`` examples: the dominant class gets round(p * total),
    the rest split evenly with the remainder going to the lowest class ids."""
    dominant = int(round(spec.proportion * total))
    rest = total - dominant
    others = [c for c in range(k) if c != spec.dominant_class]
    base, extra = divmod(rest, k - 1)
    counts = np.zeros(k, dtype=np.int64)
    counts[spec.dominant_class] = dominant
    for j, c in enumerate(others):
        counts[c] = base + (1 if j < extra else 0)
    return counts


def apply_imbalance(dataset: Dataset, spec: ImbalanceSpec, seed: int = 0, total: int | None = None) -> Dataset:
    """Subsample (without replacement) to the requested class proportions.

    ``total`` defaults to the largest size the available examples allow.
    """
    k = dataset.class_count
    if not 0 <= spec.dominant_class < k:
        raise DataError("dominant class out of range")
    have = dataset.class_counts()
    if total is None:
        min_other = min(have[c] for c in range(k) if c != spec.dominant_class)
        total = int(min(have[spec.dominant_class] / spec.proportion, min_other * (k - 1) / (1 - spec.proportion)))
        while total > 0 and np.any(imbalance_counts(k, spec, total) > have):
            total -= 1
    counts = imbalance_counts(k, spec, total)
    if np.any(counts > have) or total < k or np.any(counts == 0):
        raise DataError(f"cannot draw class sizes {counts.tolist()} from {have.tolist()}")
    rng = np.random.default_rng(seed)
    keep = []
    for c in range(k):
        members = np.flatnonzero(dataset.labels == c)
        keep.append(np.sort(rng.choice(members, size=counts[c], replace=False)))
    return dataset.subset(np.concatenate(keep))


def inject_label_noise(dataset: Dataset, spec: NoiseSpec) -> tuple[Dataset, np.ndarray]:
    """Flip each label with probability ``flip_rate`` to a uniformly chosen other class.

    Returns the noisy dataset and a boolean mask of flipped positions.
    """
    rng = np.random.default_rng(spec.seed)
    n, k = len(dataset), dataset.class_count
    flip = rng.random(n) < spec.flip_rate
    shift = rng.integers(1, k, size=n)
    labels = np.where(flip, (dataset.labels + shift) % k, dataset.labels)
    return replace(dataset, labels=labels), flip


def split_validation_balanced(dataset: Dataset, per_class: int = 3, seed: int = 0, eval_per_class: int = 15,
                              clean_mask=None) -> tuple[Dataset, Dataset, Dataset]:
    """Carve a meta-validation set and an evaluation set, both class-balanced.

    Only examples marked clean (``clean_mask``; default: all) are eligible.
    Returns ``(train, meta_val, eval_val)``, pairwise disjoint.
    """
    clean = np.ones(len(dataset), dtype=bool) if clean_mask is None else np.asarray(clean_mask, dtype=bool)
    rng = np.random.default_rng(seed)
    need = per_class + eval_per_class
    meta_idx, eval_idx = [], []
    for c in range(dataset.class_count):
        pool = np.flatnonzero((dataset.labels == c) & clean)
        if len(pool) < need:
            raise DataError(f"class {c}: {len(pool)} clean examples, need {need}")
        pick = rng.choice(pool, size=need, replace=False)
        meta_idx.append(np.sort(pick[:per_class]))
        eval_idx.append(np.sort(pick[per_class:]))
    meta_idx = np.concatenate(meta_idx)
    eval_idx = np.concatenate(eval_idx)
    rest = np.ones(len(dataset), dtype=bool)
    rest[meta_idx] = False
    rest[eval_idx] = False
    return dataset.subset(np.flatnonzero(rest)), dataset.subset(meta_idx), dataset.subset(eval_idx)


@dataclass(frozen=True)
class CsvSchema:
    class_count: int | None = None
    header: bool = False


def load_csv(path, schema: CsvSchema = CsvSchema()) -> Dataset:
    """Numeric features followed by an integer label in the last column."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise CsvError(path, None, str(e)) from e
    rows, labels = [], []
    width = None
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        if schema.header and lineno == 1:
            continue
        if not row or all(not cell.strip() for cell in row):
            continue
        if width is None:
            width = len(row)
            if width < 2:
                raise CsvError(path, lineno, "need at least one feature and a label")
        elif len(row) != width:
            raise CsvError(path, lineno, f"ragged row: {len(row)} columns, expected {width}")
        try:
            rows.append([float(c) for c in row[:-1]])
            label = float(row[-1])
        except ValueError as e:
            raise CsvError(path, lineno, f"not a number: {e}") from None
        if label != int(label):
            raise CsvError(path, lineno, f"label {row[-1]!r} is not an integer")
        label = int(label)
        if label < 0 or (schema.class_count is not None and label >= schema.class_count):
            raise CsvError(path, lineno, f"label {label} outside declared range")
        labels.append(label)
    if not rows:
        raise CsvError(path, None, "no data rows")
    k = schema.class_count if schema.class_count is not None else max(max(labels) + 1, 2)
    return Dataset(np.array(rows), np.array(labels), k, provenance="csv")


def write_csv(dataset: Dataset, path, header: bool = False) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if header:
            fh.write(",".join([f"x{i}" for i in range(dataset.dim)] + ["label"]) + "\n")
        for x, y in zip(dataset.features, dataset.labels):
            fh.write(",".join(f"{v:.17g}" for v in x) + f",{int(y)}\n")
