"""Clean, robust and combined accuracy."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..attacks import AttackBudget, AttackConfig, evaluate_attack
from ..dataset import LabeledSet
from ..errors import ConfigurationError, UsageError
from ..knn import NNIndex, NNSurrogate, certified_flags, exact_robust_accuracy
from ..knn import predict as knn_predict

MODES = ("exact", "certified", "empirical")
COMBINERS = ("mean", "joint")


def _predictions(predictor, X) -> np.ndarray:
    if isinstance(predictor, NNIndex):
        return np.atleast_1d(knn_predict(predictor, X))
    if hasattr(predictor, "predict"):
        return np.asarray(predictor.predict(X))
    return np.asarray(predictor(X))


def clean_accuracy(predictor, data: LabeledSet) -> float:
    """Fraction of examples whose predicted label equals the true one."""
    if data is None or len(data) == 0:
        raise ConfigurationError("clean accuracy of an empty set is undefined")
    return float(np.mean(_predictions(predictor, data.pixels) == data.labels))


@dataclass(frozen=True)
class RobustResult:
    value: float
    mode: str
    budget: AttackBudget
    flags: np.ndarray = field(repr=False)
    lower: float = math.nan
    upper: float = math.nan

    def __float__(self):
        return self.value


def robust_accuracy(predictor, data: LabeledSet, budget: AttackBudget, evaluator: str = "exact",
                    attack: AttackConfig | None = None, box: bool = False) -> RobustResult:
    """Robust accuracy in one of three modes.

    ``exact`` and ``certified`` need a 1NN index. ``empirical`` attacks the
    model (a 1NN index is attacked through its differentiable surrogate);
    it is an upper bound on the true value.
    ``flags`` marks the examples counted as robust.
    """
    if evaluator not in MODES:
        raise ConfigurationError(f"unknown evaluator {evaluator!r}")
    if evaluator in ("exact", "certified") and not isinstance(predictor, NNIndex):
        raise UsageError(f"{evaluator} robust accuracy is only defined for the 1NN classifier")
    if evaluator == "exact":
        res = exact_robust_accuracy(predictor, data, budget.eps, budget.p, box=box)
        flags = res.robust == 1
        return RobustResult(res.fraction, "exact", budget, flags, res.lower, res.upper)
    if evaluator == "certified":
        flags = certified_flags(predictor, data, budget.eps, budget.p)
        v = float(np.mean(flags))
        return RobustResult(v, "certified", budget, flags, v, v)
    model = NNSurrogate(predictor) if isinstance(predictor, NNIndex) else predictor
    attack = attack or AttackConfig(steps=100, variant="apgd_ce")
    outs = evaluate_attack(model, data.pixels, data.labels, budget, attack, data.ids)
    flags = np.array([not o.success for o in outs])
    v = float(np.mean(flags))
    return RobustResult(v, "empirical", budget, flags, math.nan, v)


def combined_ra(ra_l2, ra_linf, mode: str = "mean") -> float:
    """Combine l2 and l-inf robust accuracy.

    ``mean`` averages two fractions. ``joint`` needs per-example robust
    flags and counts the examples robust under both budgets.
    """
    if mode not in COMBINERS:
        raise ConfigurationError(f"unknown combiner {mode!r}")
    if mode == "mean":
        a, b = float(ra_l2), float(ra_linf)
        if not (0 <= a <= 1 and 0 <= b <= 1):
            raise ConfigurationError("robust accuracies must lie in [0, 1]")
        return (a + b) / 2.0
    if np.ndim(ra_l2) == 0 or np.ndim(ra_linf) == 0:
        raise UsageError("joint combination needs per-example robust flags")
    a, b = np.asarray(ra_l2, dtype=bool), np.asarray(ra_linf, dtype=bool)
    if a.shape != b.shape:
        raise UsageError("flag arrays differ in length")
    return float(np.mean(a & b))
