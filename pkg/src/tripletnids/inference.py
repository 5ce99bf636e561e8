"""KNN-family classifiers over cached embeddings, plus a linear probe."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .contrastive import cross_distances, row_distances
from .data import BalancedSampler, FlowDataset, compute_sample_weights
from .errors import DataError, NumericError
from .rng import Rng

VOTE_RULES = ("hard", "soft", "weighted")


@dataclass(frozen=True, eq=False)
class EmbeddingIndex:
    Z_ref: np.ndarray
    labels: np.ndarray
    metric: str
    class_map: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return len(self.class_map)

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)

    def to_dict(self) -> dict:
        return {"metric": self.metric, "class_map": list(self.class_map),
                "labels": self.labels.tolist(), "embeddings": self.Z_ref.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "EmbeddingIndex":
        labels = np.array(d["labels"], dtype=np.int64)
        Z = np.array(d["embeddings"], dtype=np.float64).reshape(len(labels), -1)
        return cls(Z, labels, d["metric"], tuple(d["class_map"]))


@dataclass
class NeighborSet:
    indices: np.ndarray
    distances: np.ndarray
    class_counts: np.ndarray


def build_index(params: nn.EncoderParams | None, ds: FlowDataset, metric: str = "euclidean") -> EmbeddingIndex:
    """Embed ``ds`` in eval mode. ``params=None`` indexes the raw features."""
    Z = ds.features.copy() if params is None else nn.embed(params, ds.features)
    if not np.all(np.isfinite(Z)):
        raise NumericError("non-finite reference embedding")
    return EmbeddingIndex(Z, ds.labels.copy(), metric, ds.class_map)


def knn_query(index: EmbeddingIndex, Zq: np.ndarray, k: int, chunk: int = 256):
    """Exact k nearest references for every query row.

    Returns ``(indices, distances)``, both ``n_query x k``, distances ascending;
    equal distances resolve to the lower reference index.
    """
    if len(index) == 0:
        raise DataError("empty reference index")
    if not 1 <= k <= len(index):
        raise ValueError(f"k={k} outside [1, {len(index)}]")
    Zq = np.atleast_2d(np.asarray(Zq, dtype=np.float64))
    idx = np.empty((len(Zq), k), dtype=np.int64)
    dist = np.empty((len(Zq), k))
    for s in range(0, len(Zq), chunk):
        D = cross_distances(Zq[s:s + chunk], index.Z_ref, index.metric)
        order = np.argsort(D, axis=1, kind="stable")[:, :k]
        idx[s:s + chunk] = order
        dist[s:s + chunk] = np.take_along_axis(D, order, axis=1)
    return idx, dist


def knn_neighbors(index: EmbeddingIndex, z_test: np.ndarray, k: int) -> NeighborSet:
    idx, dist = knn_query(index, np.asarray(z_test, dtype=np.float64).reshape(1, -1), k)
    counts = np.bincount(index.labels[idx[0]], minlength=index.n_classes)
    return NeighborSet(idx[0], dist[0], counts)


def _resolve(primary: np.ndarray, cumulative: np.ndarray) -> np.ndarray:
    """Row-wise argmax of ``primary``; ties go to smaller cumulative distance, then lower class id."""
    best = primary.max(axis=1, keepdims=True)
    tied = primary == best
    cum = np.where(tied, cumulative, np.inf)
    tied &= cum == cum.min(axis=1, keepdims=True)
    return np.argmax(tied, axis=1)


def vote(neighbor_labels: np.ndarray, neighbor_dist: np.ndarray, C: int, rule: str = "hard",
         tau: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Turn neighbour lists into predictions and per-class scores.

    hard: neighbour counts. soft: mean distance to the neighbours of each class
    (lower wins; absent classes score inf). weighted: log of the summed
    ``exp(-d / tau)`` per class.
    """
    n, k = neighbor_labels.shape
    onehot = np.zeros((n, k, C))
    onehot[np.arange(n)[:, None], np.arange(k)[None, :], neighbor_labels] = 1.0
    counts = onehot.sum(axis=1)
    cumulative = np.einsum("nkc,nk->nc", onehot, neighbor_dist)
    if rule == "hard":
        scores = counts
        primary = counts
    elif rule == "soft":
        with np.errstate(divide="ignore", invalid="ignore"):
            scores = np.where(counts > 0, cumulative / counts, np.inf)
        primary = -scores
    elif rule == "weighted":
        if tau <= 0:
            raise ValueError("temperature must be positive")
        logits = np.where(onehot > 0, -neighbor_dist[:, :, None] / tau, -np.inf)
        top = logits.max(axis=1, keepdims=True)
        safe_top = np.where(np.isfinite(top), top, 0.0)
        with np.errstate(divide="ignore"):
            scores = np.log(np.exp(logits - safe_top).sum(axis=1)) + safe_top[:, 0, :]
        primary = scores
    else:
        raise ValueError(f"unknown vote rule {rule!r}; expected one of {VOTE_RULES}")
    return _resolve(primary, cumulative), scores


def knn_predict(index: EmbeddingIndex, Zq: np.ndarray, k: int, rule: str = "hard", tau: float = 0.1):
    """Predicted class ids and per-class scores for every query row."""
    Zq = np.atleast_2d(np.asarray(Zq, dtype=np.float64))
    idx, dist = knn_query(index, Zq, k)
    return vote(index.labels[idx], dist, index.n_classes, rule, tau)


def random_prototype_predict(index: EmbeddingIndex, Zq: np.ndarray, rng: Rng) -> np.ndarray:
    """Compare each query with one randomly drawn reference per class; nearest class wins."""
    Zq = np.atleast_2d(np.asarray(Zq, dtype=np.float64))
    C = index.n_classes
    rows = [np.flatnonzero(index.labels == c) for c in range(C)]
    if any(len(r) == 0 for r in rows):
        raise DataError("every class needs at least one reference for prototype inference")
    n = len(Zq)
    sizes = np.array([len(r) for r in rows])
    draws = rng.integers_each(np.tile(sizes, n)).reshape(n, C)
    D = np.empty((n, C))
    for c in range(C):
        D[:, c] = row_distances(Zq, index.Z_ref[rows[c][draws[:, c]]], index.metric)
    return np.argmin(D, axis=1)


def rebalance_index(index: EmbeddingIndex, rng: Rng) -> EmbeddingIndex:
    """Subsample every present class without replacement down to the smallest class count."""
    counts = index.class_counts
    target = int(counts[counts > 0].min())
    keep = []
    for c in range(index.n_classes):
        rows = np.flatnonzero(index.labels == c)
        if len(rows):
            keep.append(rows[rng.sample_without_replacement(len(rows), target)])
    keep = np.sort(np.concatenate(keep))
    return EmbeddingIndex(index.Z_ref[keep], index.labels[keep], index.metric, index.class_map)


@dataclass
class LinearProbe:
    params: nn.EncoderParams

    def logits(self, Z: np.ndarray) -> np.ndarray:
        return nn.embed(self.params, Z)

    def predict(self, Z: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(Z), axis=1)


def linear_probe(Z: np.ndarray, labels: np.ndarray, n_classes: int, rng: Rng, *, epochs: int = 50,
                 batch_size: int = 128, lr: float = 1e-2, weight_decay: float = 0.0,
                 balanced: bool = True) -> LinearProbe:
    """Softmax-regression head trained with AdamW on frozen embeddings.

    ``balanced=True`` draws class-balanced batches; ``False`` samples the
    natural label distribution. The head starts at zero, so an untrained
    probe predicts class 0 everywhere.
    """
    Z = np.asarray(Z, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(np.unique(labels)) < 2:
        raise DataError("a linear probe needs at least two classes")
    params = nn.EncoderParams([np.zeros((n_classes, Z.shape[1]))], [np.zeros(n_classes)])
    steps_per_epoch = max(1, math.ceil(len(Z) / batch_size))
    total = epochs * steps_per_epoch
    if total == 0:
        return LinearProbe(params)
    weights = compute_sample_weights(labels) if balanced else np.full(len(Z), 1.0 / len(Z))
    sampler = BalancedSampler(weights)
    state = nn.OptimState.for_params(params, lr, total, weight_decay)
    for _ in range(total):
        batch = sampler.draw(max(2, batch_size), rng)
        logits, trace = nn.forward(params, Z[batch])
        _, dlogits = nn.softmax_xent(logits, labels[batch])
        nn.adamw_step(state, params, nn.backward(params, trace, dlogits))
    if not params.all_finite():
        raise NumericError("linear probe diverged")
    return LinearProbe(params)


def probe_predict(probe: LinearProbe, Z: np.ndarray) -> np.ndarray:
    return probe.predict(Z)
