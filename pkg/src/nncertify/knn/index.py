"""Exact flat 1-nearest-neighbor index over a two-class training set."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..dataset import LabeledSet
from ..errors import ConfigurationError, ValidationError

# keeps a (queries x train) distance block under ~128 MB of float64
_BLOCK_ENTRIES = 16_000_000


@dataclass(frozen=True, eq=False)
class NNIndex:
    """Training vectors in their original order plus per-class views.

    Ties at exactly equal distance resolve to the lowest training index.
    """

    vectors: np.ndarray
    labels: np.ndarray
    sq_norms: np.ndarray
    class_rows: tuple[np.ndarray, ...]

    @property
    def n_features(self) -> int:
        return self.vectors.shape[1]

    @property
    def counts(self) -> tuple[int, ...]:
        return tuple(len(r) for r in self.class_rows)

    def __len__(self):
        return self.vectors.shape[0]

    def class_vectors(self, c: int) -> np.ndarray:
        return self.vectors[self.class_rows[c]]


@dataclass(frozen=True)
class Margin:
    d_same: float
    d_other: float
    nearest_same_id: int
    nearest_other_id: int

    @property
    def delta(self) -> float:
        return self.d_other - self.d_same


@dataclass(frozen=True)
class Margins:
    """Vectorised margins for a batch of queries."""

    d_same: np.ndarray
    d_other: np.ndarray
    nearest_same_id: np.ndarray
    nearest_other_id: np.ndarray
    predicted: np.ndarray

    @property
    def delta(self) -> np.ndarray:
        return self.d_other - self.d_same

    def __len__(self):
        return len(self.d_same)

    def __getitem__(self, i) -> Margin:
        return Margin(float(self.d_same[i]), float(self.d_other[i]),
                      int(self.nearest_same_id[i]), int(self.nearest_other_id[i]))


def build_index(train: LabeledSet | np.ndarray, labels=None) -> NNIndex:
    """Index a binary training set. Accepts a LabeledSet or (vectors, labels)."""
    if isinstance(train, LabeledSet):
        vectors, labels = train.pixels, train.labels
    else:
        vectors = train
    vectors = np.array(vectors, dtype=np.float64, order="C", ndmin=2)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (vectors.shape[0],):
        raise ValidationError("labels must have one entry per vector")
    if not np.all(np.isfinite(vectors)):
        raise ValidationError("training vectors contain NaN or Inf")
    if labels.size and (labels.min() < 0 or labels.max() > 1):
        raise ValidationError("a binary index needs labels in {0, 1}")
    rows = tuple(np.flatnonzero(labels == c) for c in (0, 1))
    if any(len(r) == 0 for r in rows):
        raise ConfigurationError("each class needs at least one training vector")
    sq = np.einsum("ij,ij->i", vectors, vectors)
    for arr in (vectors, labels, sq, *rows):
        arr.flags.writeable = False
    return NNIndex(vectors, labels, sq, rows)


def _as_queries(index: NNIndex, x) -> np.ndarray:
    q = np.asarray(x, dtype=np.float64)
    if q.ndim == 1:
        q = q[None, :]
    if q.ndim != 2 or q.shape[1] != index.n_features:
        raise ValidationError(f"query dimension {q.shape[-1]} != index dimension {index.n_features}")
    if not np.all(np.isfinite(q)):
        raise ValidationError("query contains NaN or Inf")
    return q


def sq_distances(queries: np.ndarray, vectors: np.ndarray, sq_norms=None) -> np.ndarray:
    """Squared l2 distances via the Gram expansion, clipped at zero."""
    if sq_norms is None:
        sq_norms = np.einsum("ij,ij->i", vectors, vectors)
    qn = np.einsum("ij,ij->i", queries, queries)
    d2 = qn[:, None] + sq_norms[None, :] - 2.0 * (queries @ vectors.T)
    np.maximum(d2, 0.0, out=d2)
    return d2


def _blocks(n_queries: int, n_train: int):
    step = max(1, _BLOCK_ENTRIES // max(n_train, 1))
    for lo in range(0, n_queries, step):
        yield slice(lo, min(lo + step, n_queries))


def _exact_dist(q, v):
    diff = q - v
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


def predict(index: NNIndex, x) -> np.ndarray | int:
    """Label of the nearest training vector (lowest index on ties)."""
    q = _as_queries(index, x)
    out = np.empty(len(q), dtype=np.int64)
    for s in _blocks(len(q), len(index)):
        d2 = sq_distances(q[s], index.vectors, index.sq_norms)
        out[s] = index.labels[np.argmin(d2, axis=1)]
    return int(out[0]) if np.ndim(x) == 1 else out


def margins(index: NNIndex, X, true_labels) -> Margins:
    """Per-class nearest distances for a batch of queries (full exact scan).

    Neighbours are located with the Gram expansion; the reported distances
    are recomputed directly from the difference vectors.
    """
    q = _as_queries(index, X)
    y = np.broadcast_to(np.asarray(true_labels, dtype=np.int64), (len(q),))
    nearest = np.empty((len(q), 2), dtype=np.int64)
    pred = np.empty(len(q), dtype=np.int64)
    for s in _blocks(len(q), len(index)):
        d2 = sq_distances(q[s], index.vectors, index.sq_norms)
        pred[s] = index.labels[np.argmin(d2, axis=1)]
        for c in (0, 1):
            rows = index.class_rows[c]
            nearest[s, c] = rows[np.argmin(d2[:, rows], axis=1)]
    ar = np.arange(len(q))
    same_id = nearest[ar, y]
    other_id = nearest[ar, 1 - y]
    d_same = _exact_dist(q, index.vectors[same_id])
    d_other = _exact_dist(q, index.vectors[other_id])
    return Margins(d_same, d_other, same_id, other_id, pred)


def margin(index: NNIndex, x, true_label: int) -> Margin:
    return margins(index, np.asarray(x)[None, :] if np.ndim(x) == 1 else x, [true_label])[0]


def class_distance_pair(index: NNIndex) -> tuple[float, int, int]:
    """Minimum cross-class l2 distance and the ids of the closest pair."""
    rows0, rows1 = index.class_rows
    a, b = index.vectors[rows0], index.vectors[rows1]
    best = (np.inf, -1, -1)
    for s in _blocks(len(a), len(b)):
        d2 = sq_distances(a[s], b, index.sq_norms[rows1])
        flat = int(np.argmin(d2))
        i, j = divmod(flat, d2.shape[1])
        if d2[i, j] < best[0]:
            best = (d2[i, j], int(rows0[s.start + i]), int(rows1[j]))
    _, i, j = best
    d = float(np.linalg.norm(index.vectors[i] - index.vectors[j]))
    return d, i, j


def class_distance(index: NNIndex) -> float:
    return class_distance_pair(index)[0]
