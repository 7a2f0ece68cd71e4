"""Labeled datasets, four-way disjoint splits, synthetic data and CSV I/O."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import IntegrityError, ParseError, RejectedInputError, RejectedSplitError
from .seeding import rng


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Feature matrix ``X`` (n, d), labels ``y`` (n,) and unique record ids."""

    ids: np.ndarray
    X: np.ndarray
    y: np.ndarray
    num_classes: int

    def __post_init__(self):
        X = np.array(self.X, dtype=np.float64)
        y = np.array(self.y, dtype=np.int64)
        ids = np.array(self.ids)
        if X.ndim != 2:
            raise RejectedInputError(f"features must be 2-D, got shape {X.shape}")
        if y.shape != (X.shape[0],) or ids.shape != (X.shape[0],):
            raise RejectedInputError(
                f"ids {ids.shape}, features {X.shape} and labels {y.shape} disagree")
        if self.num_classes < 1:
            raise RejectedInputError("num_classes must be positive")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise RejectedInputError(
                f"labels must lie in [0, {self.num_classes}), got [{y.min()}, {y.max()}]")
        if np.unique(ids).size != ids.size:
            raise IntegrityError("record ids are not unique")
        for a in (X, y, ids):
            a.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "num_classes", int(self.num_classes))

    def __len__(self) -> int:
        return self.y.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.ids[idx], self.X[idx], self.y[idx], self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.num_classes)

    def id_set(self) -> set:
        return set(self.ids.tolist())


@dataclass(frozen=True)
class SynthConfig:
    class_count: int = 10
    dim: int = 16
    points_per_class: int = 100
    class_mean_scale: float = 2.0
    noise_sigma: float = 0.3
    seed: int = 0

    def __post_init__(self):
        for name in ("class_count", "dim", "points_per_class"):
            if getattr(self, name) < 1:
                raise RejectedInputError(f"{name} must be positive")
        if not self.class_mean_scale > 0 or not self.noise_sigma > 0:
            raise RejectedInputError("class_mean_scale and noise_sigma must be positive")


def _draw_means(gen: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    directions = gen.standard_normal((cfg.class_count, cfg.dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return cfg.class_mean_scale * directions


def class_means(cfg: SynthConfig) -> np.ndarray:
    """Per-class centres: uniform directions on the unit sphere times the scale."""
    return _draw_means(rng(cfg.seed), cfg)


def synth_generate(cfg: SynthConfig, id_offset: int = 0) -> LabeledDataset:
    """Isotropic Gaussian blobs, one per class, stored class-major.

    Shrinking ``class_mean_scale`` or growing ``noise_sigma`` makes the
    classes overlap, which is how test fixtures dial in source-model
    overfitting.
    """
    gen = rng(cfg.seed)
    means = _draw_means(gen, cfg)
    n = cfg.class_count * cfg.points_per_class
    y = np.repeat(np.arange(cfg.class_count), cfg.points_per_class)
    X = means[y] + cfg.noise_sigma * gen.standard_normal((n, cfg.dim))
    return LabeledDataset(np.arange(id_offset, id_offset + n), X, y, cfg.class_count)


def split_four_way(dataset: LabeledDataset, sizes: Sequence[int], seed: int,
                   stratified: bool = True) -> tuple[LabeledDataset, ...]:
    """Split into (source train, source test, shadow train, shadow test).

    The four parts are pairwise disjoint.  With ``stratified`` every part
    holds the same number of records of each class, so each size must be a
    multiple of the class count.  Records not needed are dropped.
    """
    sizes = [int(s) for s in sizes]
    if len(sizes) != 4 or min(sizes) < 0:
        raise RejectedSplitError(f"need four nonnegative sizes, got {sizes}")
    if sum(sizes) > len(dataset):
        raise RejectedSplitError(
            f"sizes sum to {sum(sizes)} but the dataset has {len(dataset)} records")
    gen = rng(seed)
    if not stratified:
        order = gen.permutation(len(dataset))
        bounds = np.cumsum([0] + sizes)
        return tuple(dataset.subset(np.sort(order[bounds[i]:bounds[i + 1]])) for i in range(4))

    c = dataset.num_classes
    bad = [s for s in sizes if s % c]
    if bad:
        raise RejectedSplitError(
            f"stratified split needs sizes divisible by {c} classes, got {bad}")
    per_class = [s // c for s in sizes]
    counts = dataset.class_counts()
    if counts.min() < sum(per_class):
        raise RejectedSplitError(
            f"class {int(counts.argmin())} has {counts.min()} records, "
            f"{sum(per_class)} needed for a stratified split")
    parts: list[list[np.ndarray]] = [[] for _ in range(4)]
    for cls in range(c):
        members = gen.permutation(np.flatnonzero(dataset.y == cls))
        lo = 0
        for k, take in enumerate(per_class):
            parts[k].append(members[lo:lo + take])
            lo += take
    return tuple(dataset.subset(np.sort(np.concatenate(p))) for p in parts)


def stratified_sample(dataset: LabeledDataset, size: int, seed: int) -> LabeledDataset:
    """Draw ``size`` records with equal per-class counts, without replacement."""
    (part, _, _, _) = split_four_way(dataset, (size, 0, 0, 0), seed)
    return part


def load_table(path, num_classes: int | None = None) -> LabeledDataset:
    """Read ``id,label,f_0,...,f_{d-1}`` rows (a header row is optional).

    The feature dimension comes from the first data row; every later row
    must match it.
    """
    path = Path(path)
    ids, labels, feats = [], [], []
    dim = None
    with path.open(newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if lineno == 1 and row[0].strip().lower() == "id":
                continue
            if len(row) < 3:
                raise ParseError(f"{path}:{lineno}: expected id, label and features")
            if dim is None:
                dim = len(row) - 2
            elif len(row) - 2 != dim:
                raise ParseError(
                    f"{path}:{lineno}: row has {len(row) - 2} features, expected {dim}")
            try:
                label = int(row[1])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: label {row[1]!r} is not an integer") from None
            try:
                feats.append([float(v) for v in row[2:]])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            ids.append(row[0].strip())
            labels.append(label)
    if dim is None:
        raise ParseError(f"{path}: no data rows")
    seen = set()
    for rid in ids:
        if rid in seen:
            raise IntegrityError(f"{path}: duplicate record id {rid!r}")
        seen.add(rid)
    if all(rid.lstrip("-").isdigit() for rid in ids):
        id_arr = np.array([int(r) for r in ids], dtype=np.int64)
    else:
        id_arr = np.array(ids)
    y = np.array(labels, dtype=np.int64)
    if y.min() < 0:
        raise ParseError(f"{path}: negative label {y.min()}")
    k = int(y.max()) + 1 if num_classes is None else num_classes
    return LabeledDataset(id_arr, np.array(feats), y, k)


def save_table(dataset: LabeledDataset, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "label"] + [f"f_{j}" for j in range(dataset.dim)])
        for rid, label, x in zip(dataset.ids.tolist(), dataset.y.tolist(), dataset.X):
            w.writerow([rid, label] + [repr(float(v)) for v in x])
