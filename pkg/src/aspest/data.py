"""Datasets, CSV ingestion, standardization and shifted-split construction."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import ConfigurationError, IngestionError, ShapeError

ROLES = ("source-train", "source-val", "target-test", "unspecified")


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    n_classes: int
    role: str = "unspecified"
    classes: Optional[list] = None
    indices: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or self.y.shape != (self.X.shape[0],):
            raise ShapeError(f"X {self.X.shape} and y {self.y.shape} do not align")
        if self.X.shape[0] < 1:
            raise ShapeError("dataset is empty")
        if not np.isfinite(self.X).all():
            raise IngestionError("features contain NaN or Inf")
        if self.y.min() < 0 or self.y.max() >= self.n_classes:
            raise ShapeError(f"labels must lie in [0, {self.n_classes})")
        if self.role not in ROLES:
            raise ConfigurationError(f"unknown role {self.role!r}")

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def subset(self, idx, role: Optional[str] = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        base = self.indices if self.indices is not None else np.arange(len(self))
        return replace(self, X=self.X[idx], y=self.y[idx], role=role or self.role,
                       indices=base[idx])

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.X).tobytes())
        h.update(np.ascontiguousarray(self.y).tobytes())
        return h.hexdigest()[:16]


def load_csv_dataset(path, label_column: str, *, delimiter: str = ",",
                     drop_columns: Sequence[str] = (), feature_columns=None,
                     classes: Optional[Sequence[str]] = None,
                     role: str = "unspecified") -> Dataset:
    """Read a headed CSV into a :class:`Dataset`.

    Labels are mapped to dense indices in sorted order of their string
    values unless ``classes`` fixes the mapping; the mapping is kept in
    ``Dataset.classes``.  Errors name the offending file row (header = 1).
    """
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"{path}: no such file")
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if label_column not in header:
            raise IngestionError(f"{path}: missing label column {label_column!r}")
        for col in list(drop_columns) + list(feature_columns or []):
            if col not in header:
                raise IngestionError(f"{path}: missing column {col!r}")
        label_pos = header.index(label_column)
        if feature_columns is None:
            skip = set(drop_columns) | {label_column}
            feat_pos = [i for i, h in enumerate(header) if h not in skip]
        else:
            feat_pos = [header.index(c) for c in feature_columns]

        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise IngestionError(
                    f"{path}: row {lineno} has {len(row)} fields, expected {len(header)}")
            try:
                rows.append([float(row[i]) for i in feat_pos])
            except ValueError as exc:
                raise IngestionError(f"{path}: row {lineno}: non-numeric feature ({exc})") from None
            labels.append(row[label_pos].strip())
    if not rows:
        raise IngestionError(f"{path}: no data rows")

    if classes is None:
        classes = sorted(set(labels))
    mapping = {c: i for i, c in enumerate(classes)}
    unknown = sorted(set(labels) - set(mapping))
    if unknown:
        raise IngestionError(f"{path}: labels {unknown} not in class mapping")
    X = np.asarray(rows, dtype=np.float64)
    if not np.isfinite(X).all():
        bad = int(np.flatnonzero(~np.isfinite(X).all(axis=1))[0]) + 2
        raise IngestionError(f"{path}: row {bad}: NaN or Inf feature")
    y = np.array([mapping[v] for v in labels], dtype=np.int64)
    return Dataset(X, y, len(classes), role, list(classes))


def write_csv_dataset(ds: Dataset, path, label_column: str = "label") -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f{j}" for j in range(ds.n_features)] + [label_column])
        names = ds.classes or list(range(ds.n_classes))
        for xi, yi in zip(ds.X, ds.y):
            w.writerow([repr(float(v)) for v in xi] + [names[yi]])


class Standardizer(TransformerMixin, BaseEstimator):
    """Per-feature standardization; zero-variance features pass through."""

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.mean_ = X.mean(axis=0)
        std = X.std(axis=0)
        constant = std == 0
        self.scale_ = np.where(constant, 1.0, std)
        self.mean_ = np.where(constant, 0.0, self.mean_)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self)
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ShapeError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return (X - self.mean_) / self.scale_

    def inverse_transform(self, X):
        check_is_fitted(self)
        X = check_array(X, dtype=np.float64)
        return X * self.scale_ + self.mean_


def standardize(fit: Dataset, apply: Sequence[Dataset]):
    """Standardize every dataset in ``apply`` with statistics from ``fit``."""
    scaler = Standardizer().fit(fit.X)
    out = [replace(ds, X=scaler.transform(ds.X)) for ds in apply]
    return out, scaler


def lof_scores(X, k: int = 20, chunk_size: int = 512) -> np.ndarray:
    """Local Outlier Factor with exactly ``k`` nearest neighbors per point.

    Neighbors exclude the point itself; distance ties are resolved by the
    lower index.  Densities are floored at 1e-12 so duplicate points do not
    divide by zero.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if not 1 <= k < n:
        raise ConfigurationError(f"need 1 <= k < n, got k={k}, n={n}")
    nbr = np.empty((n, k), dtype=np.int64)
    dist = np.empty((n, k))
    cols = np.arange(n)
    for start in range(0, n, chunk_size):
        stop = min(start + chunk_size, n)
        D = cdist(X[start:stop], X)
        rows = np.arange(stop - start)
        D[rows, rows + start] = np.inf
        if n <= 4 * k + 64:
            order = np.lexsort((np.broadcast_to(cols, D.shape), D), axis=1)[:, :k]
        else:
            part = np.argpartition(D, k, axis=1)[:, :k + 1]
            sub = np.lexsort((part, np.take_along_axis(D, part, axis=1)), axis=1)[:, :k]
            order = np.take_along_axis(part, sub, axis=1)
        nbr[start:stop] = order
        dist[start:stop] = np.take_along_axis(D, order, axis=1)
    k_dist = dist.max(axis=1)
    reach = np.maximum(dist, k_dist[nbr])
    lrd = 1.0 / np.maximum(reach.mean(axis=1), 1e-12)
    return lrd[nbr].mean(axis=1) / lrd


def _split_sizes(n: int, fraction: float) -> int:
    return int(np.floor(n * fraction + 0.5))


def split_train_val(ds: Dataset, fraction: float, seed: int = 0):
    """Seeded split; ``fraction`` of the points (rounded) go to validation.

    Classes with at least two points are represented in both splits
    whenever the requested sizes allow it.
    """
    if not 0.0 < fraction < 1.0:
        raise ConfigurationError(f"fraction must lie in (0, 1), got {fraction}")
    n = len(ds)
    n_val = _split_sizes(n, fraction)
    if n_val == 0 or n_val == n:
        raise ConfigurationError(f"fraction {fraction} leaves an empty split of {n} points")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    val = list(perm[:n_val])
    train = list(perm[n_val:])
    # Swap one point per class that is missing from a split, when possible.
    for c in range(ds.n_classes):
        for dst, src in ((val, train), (train, val)):
            if any(ds.y[i] == c for i in dst):
                continue
            donors = [i for i in src if ds.y[i] == c]
            if len(donors) < 2:
                continue
            give = donors[0]
            back = next((i for i in dst
                         if sum(ds.y[j] == ds.y[i] for j in dst) > 1), None)
            if back is None:
                continue
            src.remove(give)
            dst.remove(back)
            dst.append(give)
            src.append(back)
    train_idx = np.sort(np.asarray(train, dtype=np.int64))
    val_idx = np.sort(np.asarray(val, dtype=np.int64))
    return ds.subset(train_idx, "source-train"), ds.subset(val_idx, "source-val")


@dataclass
class SplitManifest:
    train: list
    val: list
    test: list
    seed: int
    params: dict

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(
            {"seed": self.seed, "params": self.params, "train": self.train,
             "val": self.val, "test": self.test}, sort_keys=True) + "\n")

    @classmethod
    def from_json(cls, path) -> "SplitManifest":
        d = json.loads(Path(path).read_text())
        return cls(d["train"], d["val"], d["test"], d["seed"], d["params"])

    def apply(self, ds: Dataset):
        return (ds.subset(self.train, "source-train"), ds.subset(self.val, "source-val"),
                ds.subset(self.test, "target-test"))


def lof_shift_split(ds: Dataset, contamination: float = 0.2, k: int = 20,
                    val_fraction: float = 0.125, seed: int = 0):
    """Carve a shifted test set out of ``ds`` by Local Outlier Factor.

    The ``round(contamination * n)`` points with the highest LOF become the
    target test set; the rest is split at random into source train and
    validation.  Returns ``(train, val, test, manifest)``.
    """
    if not 0.0 < contamination < 1.0:
        raise ConfigurationError(f"contamination must lie in (0, 1), got {contamination}")
    n = len(ds)
    n_test = _split_sizes(n, contamination)
    if n_test >= n:
        raise ConfigurationError("contamination leaves no source data")
    scores = lof_scores(ds.X, k=min(k, n - 1))
    order = np.argsort(-scores, kind="stable")
    test_idx = np.sort(order[:n_test])
    rest = np.sort(order[n_test:])
    rng = np.random.default_rng(seed)
    perm = rng.permutation(rest)
    n_val = _split_sizes(rest.shape[0], val_fraction)
    val_idx = np.sort(perm[:n_val])
    train_idx = np.sort(perm[n_val:])
    if train_idx.size == 0:
        raise ConfigurationError("source training split is empty")
    manifest = SplitManifest(train_idx.tolist(), val_idx.tolist(), test_idx.tolist(), seed,
                             {"kind": "lof", "contamination": contamination, "k": k,
                              "val_fraction": val_fraction})
    train, val, test = manifest.apply(ds)
    return train, val, test, manifest


def _random_rotation(d: int, angle: float, rng: np.random.Generator) -> np.ndarray:
    """Rotation by ``angle`` inside a random 2-plane of R^d."""
    basis, _ = np.linalg.qr(rng.standard_normal((d, 2)))
    u, v = basis[:, 0], basis[:, 1]
    c, s = np.cos(angle), np.sin(angle)
    R = np.eye(d) + (c - 1.0) * (np.outer(u, u) + np.outer(v, v)) + s * (np.outer(v, u) - np.outer(u, v))
    return R


def synth_gaussian_shift(n_classes: int = 6, n_features: int = 8, n_source: int = 3000,
                         n_target: int = 1000, shift_magnitude: float = 2.0, seed: int = 0,
                         *, class_separation: float = 2.5, rotation: float = 0.35,
                         val_fraction: float = 0.2):
    """Gaussian-mixture source data and a translated, rotated target.

    Source classes are Gaussians around seeded random means with an
    anisotropic diagonal covariance.  The target keeps the labels but moves
    every class mean by ``shift_magnitude`` along one random unit direction
    and rotates the noise covariance by ``rotation * shift_magnitude``
    radians (capped at pi/2).  ``shift_magnitude = 0`` reproduces the source
    distribution exactly.  Returns ``(train, val, test)``.
    """
    if n_classes < 2:
        raise ConfigurationError("need at least two classes")
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((n_classes, n_features))
    means *= class_separation / np.linalg.norm(means, axis=1, keepdims=True)
    scales = np.linspace(0.5, 1.5, n_features)
    rng.shuffle(scales)
    direction = rng.standard_normal(n_features)
    direction /= np.linalg.norm(direction)
    R = _random_rotation(n_features, min(rotation * shift_magnitude, np.pi / 2), rng)

    def draw(n, shifted):
        y = rng.integers(n_classes, size=n)
        noise = rng.standard_normal((n, n_features)) * scales
        if shifted:
            noise = noise @ R.T
            centers = means + shift_magnitude * direction
        else:
            centers = means
        return centers[y] + noise, y

    Xs, ys = draw(n_source, False)
    Xt, yt = draw(n_target, True)
    source = Dataset(Xs, ys, n_classes, "source-train")
    train, val = split_train_val(source, val_fraction, seed)
    test = Dataset(Xt, yt, n_classes, "target-test")
    return train, val, test
