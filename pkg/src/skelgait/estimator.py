"""scikit-learn style wrappers: a trainable embedder and a nearest-neighbour matcher."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import SkeletonSequence
from .evaluate import GalleryIndex, embed_sequences, identify
from .nn import NetworkConfig, build_network
from .train import TrainConfig, train


def check_sequences(X, y=None) -> list[SkeletonSequence]:
    """Accept SkeletonSequence objects or T x N x 3 arrays; labels come from ``y`` when given."""
    if isinstance(X, (SkeletonSequence, np.ndarray)) and not (isinstance(X, np.ndarray) and X.ndim == 4):
        X = [X]
    X = list(X)
    if not X:
        raise ValueError("no sequences given")
    if y is not None and len(y) != len(X):
        raise ValueError(f"{len(X)} sequences but {len(y)} labels")
    out = []
    for k, x in enumerate(X):
        label = None if y is None else str(y[k])
        if isinstance(x, SkeletonSequence):
            if label is not None and label != x.identity:
                x = SkeletonSequence(x.frames, label, x.condition, x.seq_index, x.view, x.missing)
            out.append(x)
        else:
            out.append(SkeletonSequence(np.asarray(x, dtype=np.float64), label or "?"))
    return out


def check_embeddings(E, dim: int | None = None) -> np.ndarray:
    E = np.asarray(E, dtype=np.float64)
    if E.ndim == 1:
        E = E[None]
    if E.ndim != 2:
        raise ValueError(f"embeddings must be 2-d, got shape {E.shape}")
    if not np.all(np.isfinite(E)):
        raise ValueError("embeddings contain non-finite values")
    if dim is not None and E.shape[1] != dim:
        raise ValueError(f"expected {dim}-d embeddings, got {E.shape[1]}")
    return E


class GaitEmbedder(BaseEstimator, TransformerMixin):
    """Train the graph network with batch-hard triplets; transform sequences to 256-d vectors."""

    def __init__(self, depth="normal", partition="spatial", temporal_kernel=9, layout="coco18",
                 dtype="float64", margin=0.2, learning_rate=1e-3, epochs=10, steps_per_epoch=None,
                 P=8, K=4, crop_length=64, seed=0):
        self.depth = depth
        self.partition = partition
        self.temporal_kernel = temporal_kernel
        self.layout = layout
        self.dtype = dtype
        self.margin = margin
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.steps_per_epoch = steps_per_epoch
        self.P = P
        self.K = K
        self.crop_length = crop_length
        self.seed = seed

    def _net_config(self) -> NetworkConfig:
        return NetworkConfig(depth=self.depth, partition=self.partition,
                             temporal_kernel=self.temporal_kernel, layout=self.layout, dtype=self.dtype)

    def _train_config(self) -> TrainConfig:
        return TrainConfig(P=self.P, K=self.K, margin=self.margin, learning_rate=self.learning_rate,
                           epochs=self.epochs, steps_per_epoch=self.steps_per_epoch,
                           crop_length=self.crop_length, seed=self.seed)

    def fit(self, X, y=None):
        seqs = check_sequences(X, y)
        if y is None and any(s.identity == "?" for s in seqs):
            raise ValueError("labels are required when fitting on raw arrays")
        result = train(seqs, self._train_config(), self._net_config())
        self.model_ = result.model
        self.loss_curve_ = list(result.losses)
        return self

    def init_untrained(self):
        """Fit-free initialization, handy as a chance-level baseline."""
        self.model_ = build_network(self._net_config(), seed=self.seed)
        self.loss_curve_ = []
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        return embed_sequences(self.model_, check_sequences(X))


class GalleryMatcher(BaseEstimator, ClassifierMixin):
    """Rank-1 nearest-neighbour identification against enrolled embeddings."""

    def fit(self, X, y):
        E = check_embeddings(X)
        if len(y) != len(E):
            raise ValueError(f"{len(E)} embeddings but {len(y)} labels")
        self.index_ = GalleryIndex(tuple(str(l) for l in y), E)
        self.classes_ = np.array(sorted(set(self.index_.labels)))
        self.n_features_in_ = E.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "index_")
        E = check_embeddings(X, self.n_features_in_)
        return np.array([identify(self.index_, e)[0] for e in E])

    def distances(self, X):
        check_is_fitted(self, "index_")
        E = check_embeddings(X, self.n_features_in_)
        return np.array([identify(self.index_, e)[1] for e in E])
