"""Datasets, membership masks and the augmentation generator.

Samples are addressed by integer id; ids are the row positions ``0..n-1`` of
the feature matrix, so a membership mask is simply a boolean vector over
rows.
"""
from __future__ import annotations

import csv
import dataclasses
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ArgumentError, FormatError, ValidationError


@dataclasses.dataclass(frozen=True, eq=False)
class Sample:
    id: int
    features: np.ndarray
    label: int

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (self.id == other.id and self.label == other.label
                and np.array_equal(self.features, other.features))

    __hash__ = None


@dataclasses.dataclass(frozen=True)
class Dataset:
    """Feature matrix, labels and layout.

    ``grid`` is ``None`` for unstructured vectors, otherwise ``(h, w)`` with
    ``h * w == feature_dim``.
    """

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    grid: tuple[int, int] | None = None

    def __post_init__(self):
        X = np.ascontiguousarray(self.features, dtype=np.float64)
        y = np.ascontiguousarray(self.labels, dtype=np.int64)
        if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
            raise ValidationError(f"features must be a non-empty 2-D array, got shape {X.shape}")
        if y.shape != (X.shape[0],):
            raise ValidationError("labels must have one entry per sample")
        if self.num_classes < 1:
            raise ValidationError("num_classes must be positive")
        if not np.all(np.isfinite(X)):
            raise ValidationError("features contain NaN or inf")
        if y.min() < 0 or y.max() >= self.num_classes:
            raise ValidationError(f"labels must lie in [0, {self.num_classes})")
        missing = np.setdiff1d(np.arange(self.num_classes), y)
        if missing.size:
            raise ValidationError(f"classes {missing.tolist()} have no samples")
        if self.grid is not None:
            h, w = self.grid
            if h * w != X.shape[1]:
                raise ValidationError(f"grid {h}x{w} does not match feature_dim {X.shape[1]}")
            object.__setattr__(self, "grid", (int(h), int(w)))
        X.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.features.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and self.grid == other.grid
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def ids(self) -> np.ndarray:
        return np.arange(len(self))

    def sample(self, i: int) -> Sample:
        return Sample(int(i), self.features[i], int(self.labels[i]))

    @property
    def samples(self) -> list[Sample]:
        return [self.sample(i) for i in range(len(self))]


@dataclasses.dataclass(frozen=True)
class AugmentationScheme:
    """Stochastic neighbourhood of a sample.

    ``kind="jitter"`` adds N(0, eta^2) noise to every feature.  ``kind="grid"``
    flips horizontally (when allowed) and shifts by integer offsets in
    ``[-max_shift, max_shift]`` along both axes, filling with zeros.
    """

    kind: str = "jitter"
    eta: float = 0.0
    allow_flip: bool = True
    max_shift: int = 1

    def __post_init__(self):
        if self.kind not in ("jitter", "grid"):
            raise ArgumentError(f"unknown augmentation kind {self.kind!r}")
        if self.eta < 0 or not math.isfinite(self.eta):
            raise ArgumentError("eta must be finite and >= 0")
        if self.max_shift < 0:
            raise ArgumentError("max_shift must be >= 0")

    @classmethod
    def jitter(cls, eta: float) -> "AugmentationScheme":
        return cls(kind="jitter", eta=float(eta))

    @classmethod
    def grid_moves(cls, allow_flip: bool = True, max_shift: int = 1) -> "AugmentationScheme":
        return cls(kind="grid", allow_flip=allow_flip, max_shift=int(max_shift))


def generate_synthetic(
    n_samples: int,
    num_classes: int,
    feature_dim: int,
    cluster_spread: float,
    seed: int,
    grid: tuple[int, int] | None = None,
) -> Dataset:
    """Class-balanced Gaussian clusters with centroids on the unit sphere."""
    if n_samples < 1 or num_classes < 1 or feature_dim < 1:
        raise ArgumentError("sizes must be positive")
    if n_samples < num_classes:
        raise ArgumentError("need at least one sample per class")
    if not cluster_spread > 0:
        raise ArgumentError("cluster_spread must be > 0")
    rng = np.random.default_rng(seed)
    centroids = rng.standard_normal((num_classes, feature_dim))
    centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)
    labels = rng.permutation(np.arange(n_samples) % num_classes)
    features = centroids[labels] + cluster_spread * rng.standard_normal((n_samples, feature_dim))
    return Dataset(features, labels, num_classes, grid)


def load_delimited(path: str | Path, num_classes: int, grid: tuple[int, int] | None = None) -> Dataset:
    """Read ``feature,...,feature,label`` rows; ids follow row order."""
    rows: list[list[float]] = []
    labels: list[int] = []
    width = None
    with open(path, newline="", encoding="utf-8") as fh:
        for rowno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < 2:
                raise FormatError("expected at least one feature and a label", rowno)
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise FormatError(f"expected {width} columns, found {len(row)}", rowno)
            try:
                feats = [float(cell) for cell in row[:-1]]
                label_f = float(row[-1])
            except ValueError as exc:
                raise FormatError(str(exc), rowno) from None
            if not label_f.is_integer():
                raise FormatError(f"label {row[-1]!r} is not an integer", rowno)
            label = int(label_f)
            if not 0 <= label < num_classes:
                raise ValidationError(f"row {rowno}: label {label} outside [0, {num_classes})")
            rows.append(feats)
            labels.append(label)
    if not rows:
        raise FormatError(f"{path}: no data rows")
    return Dataset(np.array(rows, dtype=np.float64), np.array(labels), num_classes, grid)


def save_delimited(dataset: Dataset, path: str | Path) -> None:
    # repr() of a float64 round-trips exactly
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for x, y in zip(dataset.features, dataset.labels):
            fh.write(",".join(repr(float(v)) for v in x))
            fh.write(f",{int(y)}\n")


def random_half_split(n: int, seed: int) -> np.ndarray:
    """Boolean mask with exactly ``n // 2`` members chosen uniformly."""
    if n < 2:
        raise ArgumentError("random_half_split needs n >= 2")
    rng = np.random.default_rng(seed)
    mask = np.zeros(n, dtype=bool)
    mask[rng.permutation(n)[: n // 2]] = True
    return mask


def _augment_rows(x: np.ndarray, n: int, scheme: AugmentationScheme, rng, grid) -> np.ndarray:
    if scheme.kind == "jitter":
        if scheme.eta == 0:
            return np.repeat(x[None, :], n, axis=0)
        return x[None, :] + scheme.eta * rng.standard_normal((n, x.shape[0]))
    h, w = grid
    img = x.reshape(h, w)
    out = np.empty((n, h * w))
    k = scheme.max_shift
    for i in range(n):
        flip = bool(rng.integers(2)) if scheme.allow_flip else False
        dy, dx = rng.integers(-k, k + 1, size=2) if k else (0, 0)
        src = img[:, ::-1] if flip else img
        out[i] = _shift(src, int(dy), int(dx)).ravel()
    return out


def _shift(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    h, w = img.shape
    out = np.zeros_like(img)
    if abs(dy) >= h or abs(dx) >= w:
        return out
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[yd, xd] = img[ys, xs]
    return out


def _check_scheme(scheme: AugmentationScheme, grid) -> None:
    if scheme.kind == "grid" and grid is None:
        raise ArgumentError("grid augmentation requires a grid-layout dataset")


def augment(
    sample: Sample,
    n: int,
    scheme: AugmentationScheme,
    seed: int,
    grid: tuple[int, int] | None = None,
) -> list[Sample]:
    """Draw ``n`` augmented copies of ``sample``; labels and ids are kept.

    The draw depends only on ``(seed, sample.id)``, so it matches the
    corresponding slice of :func:`augment_features`.
    """
    if n < 0:
        raise ArgumentError("n must be >= 0")
    _check_scheme(scheme, grid)
    if n == 0:
        return []
    rng = np.random.default_rng([seed, sample.id])
    rows = _augment_rows(np.asarray(sample.features, dtype=np.float64), n, scheme, rng, grid)
    return [Sample(sample.id, row, sample.label) for row in rows]


def augment_features(
    dataset: Dataset, ids: Sequence[int] | Iterable[int], n: int, scheme: AugmentationScheme, seed: int
) -> np.ndarray:
    """Augmentations for many samples at once, shape ``(len(ids), n, feature_dim)``."""
    if n < 0:
        raise ArgumentError("n must be >= 0")
    _check_scheme(scheme, dataset.grid)
    ids = np.asarray(list(ids), dtype=np.int64)
    out = np.empty((ids.size, n, dataset.feature_dim))
    for j, i in enumerate(ids):
        rng = np.random.default_rng([seed, int(i)])
        out[j] = _augment_rows(dataset.features[i], n, scheme, rng, dataset.grid)
    return out
