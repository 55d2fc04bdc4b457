"""Euclidean embedding distances, batch-hard mining and the triplet hinge loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, make_node

DEFAULT_MARGIN = 0.2


class MiningError(ValueError):
    pass


@dataclass(frozen=True)
class TripletBatch:
    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    margin: float = DEFAULT_MARGIN

    def __post_init__(self):
        a, p, n = (np.asarray(v, dtype=np.int64) for v in (self.anchors, self.positives, self.negatives))
        if not (a.shape == p.shape == n.shape) or a.ndim != 1:
            raise ValueError("anchors, positives and negatives must be equal-length 1-d")
        if np.any(a == p):
            raise ValueError("an anchor cannot be its own positive")
        if self.margin < 0:
            raise ValueError("margin must be nonnegative")
        object.__setattr__(self, "anchors", a)
        object.__setattr__(self, "positives", p)
        object.__setattr__(self, "negatives", n)

    def __len__(self):
        return len(self.anchors)


def pairwise_distances(emb: Tensor) -> Tensor:
    """Euclidean distance matrix of the rows of ``emb`` [B, D].

    The gradient of a zero distance is taken as zero.
    """
    if emb.ndim != 2:
        raise ShapeError(f"pairwise_distances expects [B, D], got {emb.shape}")
    if emb.shape[0] < 2:
        raise ShapeError("pairwise_distances needs at least two rows")
    e = emb.data
    diff = e[:, None, :] - e[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    np.fill_diagonal(dist, 0.0)

    def _bw(g):
        scale = np.divide(g, dist, out=np.zeros_like(dist), where=dist > 0)
        scale = scale + scale.T
        return ((scale[:, :, None] * diff).sum(axis=1),)

    return make_node(dist, (emb,), _bw)


def _check_labels(labels: Sequence, b: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (b,):
        raise MiningError(f"need {b} labels, got shape {labels.shape}")
    uniq, counts = np.unique(labels, return_counts=True)
    if len(uniq) < 2:
        raise MiningError("batch-hard mining needs at least two distinct identities")
    if np.any(counts < 2):
        raise MiningError(f"identities with a single sample: {uniq[counts < 2].tolist()}")
    return labels


def batch_hard_triplets(dist: Tensor | np.ndarray, labels: Sequence,
                        margin: float = DEFAULT_MARGIN) -> TripletBatch:
    """One triplet per anchor: farthest same-label sample, nearest other-label sample.

    Ties resolve to the smallest batch index.
    """
    d = dist.data if isinstance(dist, Tensor) else np.asarray(dist)
    b = d.shape[0]
    if d.shape != (b, b):
        raise ShapeError(f"distance matrix must be square, got {d.shape}")
    labels = _check_labels(labels, b)
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(b, dtype=bool)
    # argmax/argmin return the first extremum, i.e. the smallest index
    pos = np.where(pos_mask, d, -np.inf).argmax(axis=1)
    neg = np.where(~same, d, np.inf).argmin(axis=1)
    return TripletBatch(np.arange(b), pos, neg, margin)


def triplet_loss(dist: Tensor, triplets: TripletBatch) -> Tensor:
    """Mean of max(d(a,p) - d(a,n) + margin, 0); the hinge kink has subgradient 0."""
    d = dist.data
    a, p, n = triplets.anchors, triplets.positives, triplets.negatives
    if len(a) == 0:
        raise ValueError("empty triplet batch")
    slack = d[a, p] - d[a, n] + triplets.margin
    active = slack > 0
    loss = np.asarray(np.where(active, slack, 0.0).mean(), dtype=d.dtype)

    def _bw(g):
        gd = np.zeros_like(d)
        w = g * active / len(a)
        np.add.at(gd, (a, p), w)
        np.add.at(gd, (a, n), -w)
        return (gd,)

    return make_node(loss, (dist,), _bw)


def batch_hard_loss(emb: Tensor, labels: Sequence, margin: float = DEFAULT_MARGIN) -> tuple[Tensor, TripletBatch]:
    dist = pairwise_distances(emb)
    triplets = batch_hard_triplets(dist, labels, margin)
    return triplet_loss(dist, triplets), triplets
