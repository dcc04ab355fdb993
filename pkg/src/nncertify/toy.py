"""Two-cluster 2-D problem and decision grids over the unit square."""

from __future__ import annotations

import math

import numpy as np

from .dataset import BinaryProblem, LabeledSet
from .knn import NNIndex, build_index, class_distance, predict

TOY_DIMS = (1, 1, 2)
TOY_CENTERS = ((0.42, 0.5), (0.58, 0.5))


def make_toy2d(seed: int = 0, n_per_class: int = 100, spread: float = 0.08,
               eps: float = 0.05, centers=TOY_CENTERS) -> BinaryProblem:
    """Gaussian clusters in [0, 1]^2, redrawn until every eps-square is clean.

    Any two cross-class points closer than 2*sqrt(2)*eps are redrawn (the
    second one), which keeps each square inside its own 1NN cell. The test
    split is an independent draw of the same size.
    """
    rng = np.random.default_rng(seed)
    min_gap = 2.0 * math.sqrt(2.0) * eps

    def draw():
        pts = np.empty((2 * n_per_class, 2))
        labels = np.repeat([0, 1], n_per_class)
        for k, c in enumerate(labels):
            while True:
                p = rng.normal(centers[c], spread)
                if np.all((p >= 0) & (p <= 1)):
                    others = pts[:k][labels[:k] != c]
                    if len(others) == 0 or np.min(np.linalg.norm(others - p, axis=1)) > min_gap:
                        break
            pts[k] = p
        return LabeledSet(pts, labels, TOY_DIMS, ("a", "b"))

    return BinaryProblem(0, 1, draw(), draw(), "a_vs_b")


def grid_points(n: int = 200) -> np.ndarray:
    """Cell centres of an n x n grid over [0, 1]^2, x varying fastest."""
    c = (np.arange(n) + 0.5) / n
    gx, gy = np.meshgrid(c, c)
    return np.column_stack([gx.ravel(), gy.ravel()])


def knn_decision(index: NNIndex, pts) -> tuple[np.ndarray, np.ndarray]:
    """Labels and a signed score (distance to nearest class 0 minus class 1)."""
    from .knn import margins
    m = margins(index, pts, np.zeros(len(pts), dtype=np.int64))
    return np.atleast_1d(predict(index, pts)), m.d_same - m.d_other


def net_decision(mlp, pts) -> tuple[np.ndarray, np.ndarray]:
    logits = mlp.logits(pts)
    return np.argmax(logits, axis=1), logits[:, 1] - logits[:, 0]


def square_corners(data: LabeledSet, eps: float) -> np.ndarray:
    """(x0, y0, x1, y1) of each training point's l-inf eps-square."""
    return np.column_stack([data.pixels - eps, data.pixels + eps])


def square_violations(pts, labels, data: LabeledSet, eps: float) -> np.ndarray:
    """Per training point, number of grid points inside its square whose label differs."""
    out = np.zeros(len(data), dtype=np.int64)
    for k, (x, y) in enumerate(zip(data.pixels, data.labels)):
        inside = np.all(np.abs(pts - x) <= eps, axis=1)
        out[k] = int(np.sum(labels[inside] != y))
    return out


def toy_class_distance(data: LabeledSet) -> float:
    return class_distance(build_index(data))
