"""Differentiable stand-in for the 1NN classifier, for gradient attacks."""

from __future__ import annotations

import numpy as np

from .index import NNIndex, _as_queries, predict, sq_distances


class NNSurrogate:
    """Logits are minus the distance to the nearest training point of each
    class, divided by ``temperature``.

    The argmax of these logits is the 1NN label, and ``predict`` defers to
    the exact index so attack success is always judged on the real 1NN
    decision. The gradient uses the current nearest point of each class
    (the min is differentiable almost everywhere).
    """

    def __init__(self, index: NNIndex, temperature: float = 1.0):
        self.index = index
        self.temperature = float(temperature)

    def _nearest(self, q):
        d2 = sq_distances(q, self.index.vectors, self.index.sq_norms)
        ids = np.stack([rows[np.argmin(d2[:, rows], axis=1)] for rows in self.index.class_rows], axis=1)
        return ids

    def logits(self, X) -> np.ndarray:
        q = _as_queries(self.index, X)
        ids = self._nearest(q)
        out = np.empty((len(q), 2))
        for c in (0, 1):
            diff = q - self.index.vectors[ids[:, c]]
            out[:, c] = -np.sqrt(np.einsum("ij,ij->i", diff, diff)) / self.temperature
        return out

    def input_grad(self, X, d_logits) -> np.ndarray:
        q = _as_queries(self.index, X)
        ids = self._nearest(q)
        grad = np.zeros_like(q)
        for c in (0, 1):
            diff = q - self.index.vectors[ids[:, c]]
            norm = np.sqrt(np.einsum("ij,ij->i", diff, diff))
            unit = diff / np.maximum(norm, 1e-12)[:, None]
            grad -= (d_logits[:, c] / self.temperature)[:, None] * unit
        return grad

    def predict(self, X) -> np.ndarray:
        return np.atleast_1d(predict(self.index, X))
