"""Margin certificates for the 1NN classifier.

A correctly classified query whose wrong-class neighbour is farther than the
right-class neighbour by ``delta`` keeps its label for every l2 perturbation
of norm below ``delta / 2`` (triangle inequality on both nearest distances).
Norms with p <= 2 inherit the same radius since their unit balls sit inside
the l2 ball; for l-infinity the radius shrinks by sqrt(N).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..dataset import LabeledSet
from ..errors import ConfigurationError
from .index import Margin, Margins, NNIndex, margins

NORMS = (1, 2, math.inf)


def parse_norm(p) -> float:
    if isinstance(p, str):
        p = p.strip().lower()
        p = math.inf if p in ("inf", "linf", "∞") else float(p.lstrip("l"))
    p = float(p)
    if p not in NORMS:
        raise ConfigurationError(f"unsupported norm {p}; choose 1, 2 or inf")
    return p


@dataclass(frozen=True)
class Certificate:
    radius_l2: float
    radius_linf: float
    correct: bool
    n_features: int

    def radius(self, p) -> float:
        p = parse_norm(p)
        return self.radius_linf if p == math.inf else self.radius_l2

    @property
    def radius_lp(self) -> float:
        # any p <= 2
        return self.radius_l2


def certify(m: Margin, n_features: int, correct: bool) -> Certificate:
    delta = m.d_other - m.d_same
    r2 = delta / 2.0 if (correct and delta > 0) else 0.0
    return Certificate(r2, r2 / math.sqrt(n_features), bool(correct), int(n_features))


def certified_radii(m: Margins, true_labels, n_features: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised (radius_l2, radius_linf); zero for misclassified or non-confident queries."""
    correct = m.predicted == np.asarray(true_labels)
    r2 = np.where(correct & (m.delta > 0), m.delta / 2.0, 0.0)
    return r2, r2 / math.sqrt(n_features)


def _unpack(X, y):
    if isinstance(X, LabeledSet):
        return X.pixels, X.labels
    if y is None:
        raise ConfigurationError("labels are required when X is an array")
    return np.asarray(X, dtype=np.float64), np.asarray(y, dtype=np.int64)


def certified_flags(index: NNIndex, X, eps: float, p=2, y=None, m: Margins | None = None) -> np.ndarray:
    """Per-example flag: correct and certified radius strictly above ``eps``."""
    if eps < 0:
        raise ConfigurationError("eps must be non-negative")
    p = parse_norm(p)
    pixels, labels = _unpack(X, y)
    if m is None:
        m = margins(index, pixels, labels)
    r2, rinf = certified_radii(m, labels, index.n_features)
    radius = rinf if p == math.inf else r2
    correct = m.predicted == labels
    if eps == 0:
        return correct
    return correct & (radius > eps)


def certified_robust_accuracy(index: NNIndex, X, eps: float, p=2, y=None,
                              m: Margins | None = None) -> float:
    """Sound lower bound on robust accuracy; at eps = 0 it is the clean accuracy."""
    return float(np.mean(certified_flags(index, X, eps, p, y, m)))
