"""Exact robust accuracy of the 1NN classifier and witness statistics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigurationError, SolverError
from .certify import _unpack, certified_flags, parse_norm
from .geometry import flips_within, min_adversarial_l2, min_adversarial_linf, segment_flip_bounds
from .index import NNIndex, margins

log = logging.getLogger(__name__)

UNRESOLVED = -1


@dataclass(frozen=True)
class ExactRA:
    """Exact robust accuracy with per-example decisions.

    ``robust`` holds 1 (robust), 0 (flipped within eps) or -1 (solver failed
    and the certificate/attack bounds disagree). With unresolved examples the
    value is reported as the interval [lower, upper]; otherwise
    lower == upper == fraction.
    """

    fraction: float
    lower: float
    upper: float
    robust: np.ndarray
    certified: np.ndarray
    eps: float
    p: float

    @property
    def is_interval(self) -> bool:
        return self.lower != self.upper

    def __float__(self):
        return self.fraction


def robust_flags(index: NNIndex, X, eps: float, p=2, y=None, box: bool = False,
                 solver: str = "dykstra", attack_success=None):
    """Per-example exact decisions (see ExactRA.robust) and certified flags.

    Certified examples are accepted without geometry; misclassified examples
    are non-robust; the rest go through the bisector-cell search limited to
    radius eps. ``attack_success`` (optional boolean array) supplies empirical
    flips used only when the solver fails.
    """
    if eps < 0:
        raise ConfigurationError("eps must be non-negative")
    p = parse_norm(p)
    if p == 1:
        raise ConfigurationError("exact robust accuracy supports p = 2 or inf")
    pixels, labels = _unpack(X, y)
    m = margins(index, pixels, labels)
    cert = certified_flags(index, pixels, eps, p, labels, m)
    correct = m.predicted == labels
    robust = np.where(cert, 1, 0).astype(np.int64)
    todo = np.flatnonzero(correct & ~cert)
    if eps == 0:
        robust[todo] = 1
        return robust, cert
    if len(todo):
        # a concrete flip along the segment to the nearest wrong-class point
        # settles most non-robust examples without the cell search
        up2, upinf = segment_flip_bounds(index, pixels[todo], labels[todo],
                                         m.nearest_other_id[todo])
        upper = upinf if p == math.inf else up2
        robust[todo[upper <= eps]] = 0
        todo = todo[upper > eps]
    for i in todo:
        try:
            res = flips_within(index, pixels[i], labels[i], eps, p, box=box, solver=solver)
        except SolverError as exc:
            flipped = exc.upper_bound <= eps or (attack_success is not None and attack_success[i])
            robust[i] = 0 if flipped else UNRESOLVED
            log.warning("example %d unresolved by solver (%s); upper bound %.6g", i, exc,
                        exc.upper_bound)
            continue
        robust[i] = 0 if res.distance <= eps else 1
    return robust, cert


def exact_robust_accuracy(index: NNIndex, X, eps: float, p=2, y=None, box: bool = False,
                          solver: str = "dykstra", attack_success=None) -> ExactRA:
    """Fraction of examples whose minimal flipping perturbation exceeds eps.

    Robustness is strict: a flip at norm exactly eps counts against the
    example. The [0, 1] box is off by default.
    """
    robust, cert = robust_flags(index, X, eps, p, y, box, solver, attack_success)
    n = len(robust)
    lower = float(np.sum(robust == 1)) / n
    upper = float(np.sum(robust != 0)) / n
    return ExactRA(lower, lower, upper, robust, cert, float(eps), parse_norm(p))


def min_distances(index: NNIndex, X, y=None, p=2, box: bool = False, solver: str = "dykstra"):
    """Minimal flipping perturbation per example (list of MinPerturbation)."""
    pixels, labels = _unpack(X, y)
    p = parse_norm(p)
    out = []
    for x, lab in zip(pixels, labels):
        if p == math.inf:
            out.append(min_adversarial_linf(index, x, lab, box=box))
        else:
            out.append(min_adversarial_l2(index, x, lab, box=box, solver=solver))
    return out


def witness_histogram(witnesses) -> tuple[np.ndarray, np.ndarray]:
    """Histogram of per-pixel |delta| with bin width 1/255.

    Bin k covers [k/255, (k+1)/255); 256 bins, so |delta| = 1 lands in the
    last one. Returns (bin_lower, counts).
    """
    counts = np.zeros(256, dtype=np.int64)
    for w in witnesses:
        # the small epsilon keeps exact multiples of 1/255 in their own bin
        k = np.floor(np.abs(np.asarray(w, dtype=np.float64)) * 255.0 + 1e-9).astype(np.int64)
        counts += np.bincount(np.clip(k, 0, 255), minlength=256)
    return np.arange(256) / 255.0, counts


def attack_1nn_witness_stats(index: NNIndex, X, p=2, y=None, box: bool = True,
                             solver: str = "dykstra"):
    """Histogram data of the minimal 1NN adversarial perturbations of X.

    Examples already misclassified contribute a zero witness; examples with
    no reachable flip inside the box are skipped.
    """
    results = min_distances(index, X, y, p, box, solver)
    witnesses = [r.witness for r in results if r.witness is not None]
    bins, counts = witness_histogram(witnesses)
    return bins, counts, results


def certificate_records(index: NNIndex, X, y=None, ids=None, minimal: bool = False,
                        box: bool = False, solver: str = "dykstra") -> list[dict]:
    """One JSON-ready record per example.

    ``min_l2``, ``min_linf`` and ``anchor_id`` (the l2 anchor) are filled in
    only when ``minimal`` is set, since they need the cell search.
    """
    from .certify import certified_radii

    pixels, labels = _unpack(X, y)
    ids = np.arange(len(pixels)) if ids is None else np.asarray(ids)
    m = margins(index, pixels, labels)
    r2, rinf = certified_radii(m, labels, index.n_features)
    out = []
    for k in range(len(pixels)):
        rec = {"example_id": int(ids[k]), "d_same": float(m.d_same[k]), "d_other": float(m.d_other[k]),
               "radius_l2": float(r2[k]), "radius_linf": float(rinf[k]),
               "min_l2": None, "min_linf": None, "anchor_id": None}
        if minimal:
            a = min_adversarial_l2(index, pixels[k], labels[k], box=box, solver=solver)
            b = min_adversarial_linf(index, pixels[k], labels[k], box=box)
            rec.update(min_l2=_finite(a.distance), min_linf=_finite(b.distance),
                       anchor_id=None if a.anchor_id is None else int(a.anchor_id))
        out.append(rec)
    return out


def _finite(v):
    return float(v) if np.isfinite(v) else None
