"""Flow datasets: CSV ingestion, seeded splits, few-shot subsets and balanced batches."""

from __future__ import annotations

import csv
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .errors import DataError
from .rng import Rng


STD_FLOOR = 1e-8


def _as_rng(seed) -> Rng:
    return seed if isinstance(seed, Rng) else Rng(seed)


@dataclass(frozen=True, eq=False)
class FlowDataset:
    """Numeric flow features with integer labels; ``class_map[0]`` is benign.

    ``row_ids`` track the source row of every sample through splits and
    subsets so that train/test isolation can be audited.
    """

    features: np.ndarray
    labels: np.ndarray
    class_map: tuple[str, ...]
    feature_names: tuple[str, ...] = ()
    row_ids: np.ndarray | None = None
    dropped_count: int = 0

    def __post_init__(self):
        X = np.ascontiguousarray(self.features, dtype=np.float64)
        y = np.ascontiguousarray(self.labels, dtype=np.int64)
        if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
            raise DataError(f"features {X.shape} and labels {y.shape} do not line up")
        if len(y) and (y.min() < 0 or y.max() >= len(self.class_map)):
            raise DataError("label outside class map")
        if not np.all(np.isfinite(X)):
            raise DataError("features contain NaN or inf")
        ids = np.arange(len(y), dtype=np.int64) if self.row_ids is None else np.asarray(self.row_ids, dtype=np.int64)
        names = tuple(self.feature_names) or tuple(f"f{i}" for i in range(X.shape[1]))
        X.setflags(write=False)
        y.setflags(write=False)
        ids.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "class_map", tuple(self.class_map))
        object.__setattr__(self, "feature_names", names)
        object.__setattr__(self, "row_ids", ids)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.class_map)

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)

    def class_indices(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels == c)

    def take(self, idx) -> "FlowDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return FlowDataset(self.features[idx], self.labels[idx], self.class_map,
                           self.feature_names, self.row_ids[idx])

    def with_features(self, X: np.ndarray) -> "FlowDataset":
        return FlowDataset(X, self.labels, self.class_map, self.feature_names, self.row_ids)


def load_csv(path, label_column: str, benign: str = "BENIGN",
             classes: Sequence[str] | None = None) -> FlowDataset:
    """Read a flow CSV.

    Rows with NaN or infinite features are dropped and the count reported on
    stderr. The class named ``benign`` (case-insensitive) gets id 0; the rest
    are numbered by first appearance. Passing ``classes`` pins the class map
    instead, e.g. to read a test file in a trained model's label space.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    try:
        frame = pd.read_csv(path, skipinitialspace=True, dtype={label_column: str},
                            float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot parse {path}: {exc}") from exc
    frame.columns = [str(c).strip() for c in frame.columns]
    if label_column not in frame.columns:
        raise DataError(f"label column {label_column!r} not in header of {path}")

    raw_labels = frame.pop(label_column).astype(str).str.strip().to_numpy()
    try:
        X = frame.apply(pd.to_numeric, errors="raise").to_numpy(dtype=np.float64)
    except (ValueError, TypeError) as exc:
        raise DataError(f"non-numeric feature column in {path}: {exc}") from exc

    keep = np.all(np.isfinite(X), axis=1)
    dropped = int((~keep).sum())
    if dropped:
        print(f"{path.name}: dropped {dropped} rows with NaN/inf features", file=sys.stderr)
    X, raw_labels = X[keep], raw_labels[keep]
    if len(X) == 0:
        raise DataError(f"{path} has no usable rows")

    order = list(dict.fromkeys(raw_labels.tolist()))
    if classes is not None:
        class_map = list(classes)
        unknown = sorted(set(order) - set(class_map))
        if unknown:
            raise DataError(f"{path} has labels outside the class map: {unknown}")
    else:
        benign_name = next((c for c in order if c.lower() == benign.lower()), None)
        if benign_name is None:
            raise DataError(f"benign class {benign!r} absent from {path}")
        class_map = [benign_name] + [c for c in order if c != benign_name]
    lookup = {name: i for i, name in enumerate(class_map)}
    y = np.array([lookup[v] for v in raw_labels], dtype=np.int64)
    return FlowDataset(X, y, tuple(class_map), tuple(frame.columns),
                       np.flatnonzero(keep), dropped_count=dropped)


def save_csv(ds: FlowDataset, path, label_column: str = "label") -> None:
    """Write ``ds`` with class names in ``label_column``; floats are written with repr()."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(ds.feature_names) + [label_column])
        for row, lab in zip(ds.features.tolist(), ds.labels.tolist()):
            writer.writerow([repr(v) for v in row] + [ds.class_map[lab]])


def save_class_map(ds: FlowDataset, path) -> None:
    Path(path).write_text(json.dumps({"classes": list(ds.class_map)}) + "\n", encoding="utf-8")


def _check_min_count(ds: FlowDataset, minimum: int, what: str) -> None:
    counts = ds.class_counts
    for c, n in enumerate(counts):
        if 0 < n < minimum:
            raise DataError(f"class {ds.class_map[c]!r} has {n} samples; {what} needs >= {minimum}")


def stratified_split(ds: FlowDataset, fraction: float, seed) -> tuple[FlowDataset, FlowDataset]:
    """Per class, ``floor(fraction * n_c)`` rows go to the first split and the rest to the second."""
    if not 0.0 < fraction < 1.0:
        raise DataError("fraction must lie in (0, 1)")
    _check_min_count(ds, 2, "a split")
    rng = _as_rng(seed)
    first, second = [], []
    for c in range(ds.n_classes):
        rows = ds.class_indices(c)
        if len(rows) == 0:
            continue
        rows = rows[rng.permutation(len(rows))]
        n_first = math.floor(fraction * len(rows) + 1e-9)
        first.append(rows[:n_first])
        second.append(rows[n_first:])
    a = np.sort(np.concatenate(first))
    b = np.sort(np.concatenate(second))
    return ds.take(a), ds.take(b)


@dataclass(frozen=True)
class SubsetSpec:
    n_benign: int
    n_per_attack: int
    seed: int

    def __post_init__(self):
        if self.n_benign < 1 or self.n_per_attack < 1:
            raise DataError("subset sizes must be >= 1")


def sample_subset(train: FlowDataset, spec: SubsetSpec) -> FlowDataset:
    """Uniformly sample ``n_benign`` benign rows and ``n_per_attack`` rows of every attack class."""
    rng = Rng(spec.seed)
    picked = []
    for c in range(train.n_classes):
        rows = train.class_indices(c)
        want = spec.n_benign if c == 0 else spec.n_per_attack
        if len(rows) < want:
            raise DataError(f"class {train.class_map[c]!r} has {len(rows)} rows, subset needs {want}")
        picked.append(rows[rng.sample_without_replacement(len(rows), want)])
    return train.take(np.sort(np.concatenate(picked)))


def stratified_kfold(labels, K: int, seed) -> list[tuple[np.ndarray, np.ndarray]]:
    """Stratified folds as ``(train_indices, val_indices)`` pairs.

    Each class is permuted and cut into K chunks whose sizes differ by at most
    one, the larger chunks first. Accepts a FlowDataset or a label vector.
    """
    y = labels.labels if isinstance(labels, FlowDataset) else np.asarray(labels, dtype=np.int64)
    if K < 2:
        raise DataError("K must be >= 2")
    rng = _as_rng(seed)
    chunks: list[list[np.ndarray]] = [[] for _ in range(K)]
    for c in np.unique(y):
        rows = np.flatnonzero(y == c)
        if len(rows) < K:
            raise DataError(f"class {int(c)} has {len(rows)} samples, fewer than K={K}")
        rows = rows[rng.permutation(len(rows))]
        for i, part in enumerate(np.array_split(rows, K)):
            chunks[i].append(part)
    everything = np.arange(len(y))
    folds = []
    for parts in chunks:
        val = np.sort(np.concatenate(parts))
        train = np.setdiff1d(everything, val, assume_unique=True)
        folds.append((train, val))
    return folds


@dataclass(frozen=True, eq=False)
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.std

    def inverse_transform(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(np.array(d["mean"], dtype=np.float64), np.array(d["std"], dtype=np.float64))


def fit_normalizer(ds) -> Normalizer:
    """Per-feature population mean/std; std below 1e-8 is replaced by 1."""
    X = ds.features if isinstance(ds, FlowDataset) else np.asarray(ds, dtype=np.float64)
    if len(X) == 0:
        raise DataError("cannot fit a normalizer on an empty dataset")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std = np.where(std < STD_FLOOR, 1.0, std)
    return Normalizer(mean, std)


def apply_normalizer(nz: Normalizer, ds: FlowDataset) -> FlowDataset:
    return ds.with_features(nz.transform(ds.features))


def compute_sample_weights(ds) -> np.ndarray:
    """w_i = 1 / (|D_{y_i}| * number of classes present)."""
    y = ds.labels if isinstance(ds, FlowDataset) else np.asarray(ds, dtype=np.int64)
    counts = np.bincount(y)
    n_present = np.count_nonzero(counts)
    return 1.0 / (counts[y] * float(n_present))


class BalancedSampler:
    """Draws class-balanced batches with replacement according to sample weights."""

    def __init__(self, weights: np.ndarray):
        self.weights = np.asarray(weights, dtype=np.float64)
        self._cdf = np.cumsum(self.weights)

    def draw(self, B: int, rng: Rng) -> np.ndarray:
        if B < 2:
            raise DataError("batch size must be >= 2")
        return rng.choice_weighted(self._cdf, B)


def draw_balanced_batch(weights: np.ndarray, B: int, rng: Rng) -> np.ndarray:
    return BalancedSampler(weights).draw(B, rng)


def binarize_labels(ds: FlowDataset) -> FlowDataset:
    return FlowDataset(ds.features, (ds.labels != 0).astype(np.int64), ("benign", "malicious"),
                       ds.feature_names, ds.row_ids)


def make_blobs(counts: Sequence[int], dim: int, sep: float, seed, names: Sequence[str] | None = None,
               std: float = 1.0) -> FlowDataset:
    """Isotropic Gaussian classes whose centres sit pairwise ``sep`` apart.

    Centre c is ``sep / sqrt(2)`` along axis c, so ``dim`` must be at least
    the number of classes.
    """
    C = len(counts)
    if dim < C:
        raise DataError("blob dimension must be >= number of classes")
    rng = _as_rng(seed)
    centres = np.zeros((C, dim))
    centres[np.arange(C), np.arange(C)] = sep / math.sqrt(2.0)
    X = np.concatenate([centres[c] + std * rng.normal((n, dim)) for c, n in enumerate(counts)])
    y = np.repeat(np.arange(C), counts)
    names = tuple(names) if names else ("benign",) + tuple(f"attack{c}" for c in range(1, C))
    return FlowDataset(X, y, names)
