"""Distances, triplet/contrastive losses and online mining with exact embedding gradients.

All mining functions return the loss together with ``dL/dZ`` so the caller
can push the gradient through :func:`tripletnids.nn.backward`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .errors import DataError, NoValidTriplets
from .rng import Rng

METRICS = ("euclidean", "manhattan", "cosine")
MINING = ("batch_all", "batch_hard", "batch_semi_hard")
_CDIST_NAME = {"euclidean": "euclidean", "manhattan": "cityblock", "cosine": "cosine"}


def _check_metric(metric: str) -> None:
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")


def _check_cosine(*mats: np.ndarray) -> None:
    for M in mats:
        if np.any(np.linalg.norm(M, axis=1) == 0.0):
            raise ValueError("cosine distance is undefined for zero-norm embeddings")


def cross_distances(A: np.ndarray, B: np.ndarray, metric: str = "euclidean") -> np.ndarray:
    """Distance between every row of ``A`` and every row of ``B``."""
    _check_metric(metric)
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if metric == "cosine":
        _check_cosine(A, B)
        D = cdist(A, B, "cosine")
        return np.maximum(D, 0.0)
    return cdist(A, B, _CDIST_NAME[metric])


def pairwise_distances(Z: np.ndarray, metric: str = "euclidean") -> np.ndarray:
    """Symmetric B x B distance matrix with an exactly zero diagonal."""
    D = cross_distances(Z, Z, metric)
    np.fill_diagonal(D, 0.0)
    return D


def row_distances(A: np.ndarray, B: np.ndarray, metric: str = "euclidean") -> np.ndarray:
    """``d(A[i], B[i])`` for every row i."""
    _check_metric(metric)
    diff = A - B
    if metric == "euclidean":
        return np.sqrt(np.einsum("ij,ij->i", diff, diff))
    if metric == "manhattan":
        return np.abs(diff).sum(axis=1)
    _check_cosine(A, B)
    na = np.linalg.norm(A, axis=1)
    nb = np.linalg.norm(B, axis=1)
    return 1.0 - np.einsum("ij,ij->i", A, B) / (na * nb)


def _row_distance_grads(A, B, d, metric):
    """Partial derivatives of ``row_distances`` w.r.t. each row of A and of B."""
    diff = A - B
    if metric == "euclidean":
        safe = np.where(d > 0.0, d, 1.0)
        gA = np.where((d > 0.0)[:, None], diff / safe[:, None], 0.0)
        return gA, -gA
    if metric == "manhattan":
        gA = np.sign(diff)
        return gA, -gA
    na = np.linalg.norm(A, axis=1)[:, None]
    nb = np.linalg.norm(B, axis=1)[:, None]
    ua, ub = A / na, B / nb
    c = (1.0 - d)[:, None]
    return -(ub - c * ua) / na, -(ua - c * ub) / nb


def distance_matrix_grad(Z: np.ndarray, D: np.ndarray, G: np.ndarray, metric: str) -> np.ndarray:
    """Chain rule from ``dL/dD`` (B x B, any pattern) to ``dL/dZ``.

    ``D`` must be the pairwise matrix of ``Z``. The diagonal of ``G`` is ignored.
    Euclidean subgradient at zero distance is 0.
    """
    S = G + G.T
    np.fill_diagonal(S, 0.0)
    if metric == "euclidean":
        with np.errstate(divide="ignore", invalid="ignore"):
            W = np.where(D > 0.0, S / D, 0.0)
        return W.sum(axis=1)[:, None] * Z - W @ Z
    if metric == "manhattan":
        grad = np.empty_like(Z)
        for k in range(Z.shape[1]):
            col = Z[:, k]
            grad[:, k] = (S * np.sign(col[:, None] - col[None, :])).sum(axis=1)
        return grad
    norms = np.linalg.norm(Z, axis=1)
    U = Z / norms[:, None]
    C = 1.0 - D
    return -((S @ U) - (S * C).sum(axis=1)[:, None] * U) / norms[:, None]


def triplet_loss(d_ap, d_an, m: float):
    """Hinge on relative distances: ``max(0, d_ap - d_an + m)``."""
    return np.maximum(0.0, np.asarray(d_ap) - np.asarray(d_an) + m)


@dataclass
class MiningOutcome:
    loss: float
    grad_Z: np.ndarray
    n_valid: int
    n_active: int


def batch_all(Z, y, m: float, metric: str = "euclidean", include_self: bool = False,
              average: str = "valid") -> MiningOutcome:
    """Mean triplet loss over every valid (anchor, positive, negative) in the batch.

    ``average="valid"`` divides by the number of valid triplets including the
    zero-loss ones; ``"active"`` divides by the margin-violating ones only.
    ``include_self`` admits the degenerate positive p == a.
    """
    if average not in ("valid", "active"):
        raise ValueError("average must be 'valid' or 'active'")
    Z = np.asarray(Z, dtype=np.float64)
    y = np.asarray(y)
    D = pairwise_distances(Z, metric)
    B = len(y)
    G = np.zeros((B, B))
    total = 0.0
    n_valid = n_active = 0
    for a in range(B):
        same = y == y[a]
        pos = np.flatnonzero(same) if include_self else np.flatnonzero(same & (np.arange(B) != a))
        neg = np.flatnonzero(~same)
        if len(pos) == 0 or len(neg) == 0:
            continue
        n_valid += len(pos) * len(neg)
        order = np.argsort(D[a, neg], kind="stable")
        neg_sorted = neg[order]
        dn = D[a, neg_sorted]
        cum = np.concatenate(([0.0], np.cumsum(dn)))
        t = D[a, pos] + m
        # a triplet is active when d_an < d_ap + m
        cnt_p = np.searchsorted(dn, t, side="left")
        total += float(np.sum(cnt_p * t - cum[cnt_p]))
        n_active += int(cnt_p.sum())
        G[a, pos] += cnt_p
        t_sorted = np.sort(t)
        cnt_n = len(pos) - np.searchsorted(t_sorted, dn, side="right")
        G[a, neg_sorted] -= cnt_n
    if n_valid == 0:
        raise NoValidTriplets("batch has no valid triplets")
    denom = n_valid if average == "valid" else n_active
    if denom == 0:
        return MiningOutcome(0.0, np.zeros_like(Z), n_valid, 0)
    G /= denom
    return MiningOutcome(total / denom, distance_matrix_grad(Z, D, G, metric), n_valid, n_active)


def _anchor_masks(y):
    y = np.asarray(y)
    same = y[:, None] == y[None, :]
    eye = np.eye(len(y), dtype=bool)
    pos = same & ~eye
    neg = ~same
    return pos, neg, pos.any(axis=1) & neg.any(axis=1)


def batch_hard(Z, y, m: float, metric: str = "euclidean") -> MiningOutcome:
    """Per anchor: farthest positive against nearest negative; mean over anchors that have both."""
    Z = np.asarray(Z, dtype=np.float64)
    D = pairwise_distances(Z, metric)
    pos, neg, ok = _anchor_masks(y)
    anchors = np.flatnonzero(ok)
    if len(anchors) == 0:
        raise NoValidTriplets("no anchor has both a positive and a negative")
    hard_p = np.argmax(np.where(pos, D, -np.inf), axis=1)[anchors]
    hard_n = np.argmin(np.where(neg, D, np.inf), axis=1)[anchors]
    losses = triplet_loss(D[anchors, hard_p], D[anchors, hard_n], m)
    active = losses > 0.0
    n = len(anchors)
    G = np.zeros_like(D)
    np.add.at(G, (anchors[active], hard_p[active]), 1.0 / n)
    np.add.at(G, (anchors[active], hard_n[active]), -1.0 / n)
    return MiningOutcome(float(losses.sum() / n), distance_matrix_grad(Z, D, G, metric), n,
                         int(active.sum()))


def batch_semi_hard(Z, y, m: float, metric: str = "euclidean") -> MiningOutcome:
    """Per anchor: the highest-loss triplet among those whose positive is closer than the negative.

    Anchors with a positive and a negative but no such triplet contribute 0 and
    still count towards the mean.
    """
    Z = np.asarray(Z, dtype=np.float64)
    D = pairwise_distances(Z, metric)
    pos, neg, ok = _anchor_masks(y)
    anchors = np.flatnonzero(ok)
    if len(anchors) == 0:
        raise NoValidTriplets("no anchor has both a positive and a negative")
    n = len(anchors)
    G = np.zeros_like(D)
    total = 0.0
    n_valid = n_active = 0
    for a in anchors:
        p_idx = np.flatnonzero(pos[a])
        n_idx = np.flatnonzero(neg[a])
        order = np.argsort(D[a, n_idx], kind="stable")
        n_sorted = n_idx[order]
        dn = D[a, n_sorted]
        dp = D[a, p_idx]
        # nearest negative strictly farther than each positive
        j = np.searchsorted(dn, dp, side="right")
        has = j < len(dn)
        if not has.any():
            continue
        n_valid += 1
        gaps = np.where(has, dp - dn[np.minimum(j, len(dn) - 1)], -np.inf)
        best = int(np.argmax(gaps))
        loss = max(0.0, gaps[best] + m)
        if loss > 0.0:
            n_active += 1
            total += loss
            G[a, p_idx[best]] += 1.0 / n
            G[a, n_sorted[j[best]]] -= 1.0 / n
    return MiningOutcome(float(total / n), distance_matrix_grad(Z, D, G, metric), n_valid, n_active)


def mine(strategy: str, Z, y, m: float, metric: str = "euclidean", **kw) -> MiningOutcome:
    if strategy == "batch_all":
        return batch_all(Z, y, m, metric, **kw)
    if strategy == "batch_hard":
        return batch_hard(Z, y, m, metric)
    if strategy == "batch_semi_hard":
        return batch_semi_hard(Z, y, m, metric)
    raise ValueError(f"unknown mining strategy {strategy!r}; expected one of {MINING}")


def contrastive_pair_loss(z_i, z_j, y_ij, m: float, metric: str = "euclidean"):
    """Siamese pair loss ``y d^2 + (1 - y) max(0, m - d)^2``, averaged over pairs.

    Accepts single vectors or row-stacked batches. Returns ``(loss, grad_i, grad_j)``
    with gradients shaped like the inputs.
    """
    single = np.ndim(z_i) == 1
    A = np.atleast_2d(np.asarray(z_i, dtype=np.float64))
    Bm = np.atleast_2d(np.asarray(z_j, dtype=np.float64))
    yy = np.atleast_1d(np.asarray(y_ij, dtype=np.float64))
    d = row_distances(A, Bm, metric)
    gap = np.maximum(0.0, m - d)
    losses = yy * d ** 2 + (1.0 - yy) * gap ** 2
    n = len(d)
    dL_dd = (2.0 * yy * d - 2.0 * (1.0 - yy) * gap) / n
    gA, gB = _row_distance_grads(A, Bm, d, metric)
    gi = dL_dd[:, None] * gA
    gj = dL_dd[:, None] * gB
    if single:
        return float(losses.mean()), gi[0], gj[0]
    return float(losses.mean()), gi, gj


def offline_triplet_loss(Za, Zp, Zn, m: float, metric: str = "euclidean"):
    """Mean hinge loss over explicit triplets. Returns ``(loss, grad_a, grad_p, grad_n)``."""
    d_ap = row_distances(Za, Zp, metric)
    d_an = row_distances(Za, Zn, metric)
    losses = triplet_loss(d_ap, d_an, m)
    active = (losses > 0.0).astype(np.float64) / len(losses)
    ga1, gp = _row_distance_grads(Za, Zp, d_ap, metric)
    ga2, gn = _row_distance_grads(Za, Zn, d_an, metric)
    w = active[:, None]
    return float(losses.mean()), w * (ga1 - ga2), w * gp, -w * gn


def _class_rows(labels):
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    return classes, [np.flatnonzero(labels == c) for c in classes]


def sample_offline_triplets(labels, count: int, rng: Rng) -> np.ndarray:
    """``count`` fixed (a, p, n) index triples.

    Anchor class is uniform over classes with at least two members, a != p
    drawn uniformly inside it; the negative class is uniform over the other
    classes and its member uniform.
    """
    classes, rows = _class_rows(labels)
    sizes = np.array([len(r) for r in rows])
    anchor_ok = np.flatnonzero(sizes >= 2)
    if len(classes) < 2 or len(anchor_ok) == 0:
        raise DataError("triplets need >= 2 classes and a class with >= 2 samples")
    C = len(classes)
    ca = anchor_ok[rng.integers(len(anchor_ok), count)]
    a_off = rng.integers_each(sizes[ca])
    p_off = rng.integers_each(sizes[ca] - 1)
    p_off = p_off + (p_off >= a_off)
    cn = rng.integers(C - 1, count)
    cn = cn + (cn >= ca)
    n_off = rng.integers_each(sizes[cn])
    out = np.empty((count, 3), dtype=np.int64)
    for i in range(count):
        out[i] = rows[ca[i]][a_off[i]], rows[ca[i]][p_off[i]], rows[cn[i]][n_off[i]]
    return out


def sample_offline_pairs(labels, count: int, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """``count`` index pairs alternating similar (label 1) and dissimilar (label 0)."""
    classes, rows = _class_rows(labels)
    sizes = np.array([len(r) for r in rows])
    same_ok = np.flatnonzero(sizes >= 2)
    if len(classes) < 2 or len(same_ok) == 0:
        raise DataError("pairs need >= 2 classes and a class with >= 2 samples")
    C = len(classes)
    sim = (np.arange(count) % 2 == 0).astype(np.int64)
    n_sim = int(sim.sum())
    n_dis = count - n_sim
    cs = same_ok[rng.integers(len(same_ok), n_sim)] if n_sim else np.zeros(0, dtype=np.int64)
    i_off = rng.integers_each(sizes[cs])
    j_off = rng.integers_each(sizes[cs] - 1)
    j_off = j_off + (j_off >= i_off)
    c1 = rng.integers(C, n_dis) if n_dis else np.zeros(0, dtype=np.int64)
    c2 = rng.integers(C - 1, n_dis) if n_dis else np.zeros(0, dtype=np.int64)
    c2 = c2 + (c2 >= c1)
    k1 = rng.integers_each(sizes[c1])
    k2 = rng.integers_each(sizes[c2])
    pairs = np.empty((count, 2), dtype=np.int64)
    s = d = 0
    for i in range(count):
        if sim[i]:
            pairs[i] = rows[cs[s]][i_off[s]], rows[cs[s]][j_off[s]]
            s += 1
        else:
            pairs[i] = rows[c1[d]][k1[d]], rows[c2[d]][k2[d]]
            d += 1
    return pairs, sim
