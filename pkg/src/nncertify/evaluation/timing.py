"""Wall-clock benchmarks of training and inference per method."""

from __future__ import annotations

import math
import os
import platform
import statistics
import time
from dataclasses import dataclass

from ..attacks import AttackBudget
from ..dataset import BinaryProblem
from ..errors import ConfigurationError
from ..knn import build_index, predict
from ..trades import EARLY_STOP_EPOCHS, TradesConfig, standard_train, trades_train

BENCH_METHODS = ("1nn", "early_stop", "trades")


@dataclass(frozen=True)
class TimingRecord:
    method: str
    train_seconds: float
    inference_seconds: float
    hardware: str

    def __post_init__(self):
        if self.train_seconds < 0 or self.inference_seconds < 0:
            raise ConfigurationError("timings must be non-negative")


def hardware_note() -> str:
    return f"{platform.machine()} {platform.processor() or 'cpu'} x{os.cpu_count()} python {platform.python_version()}"


def _median_time(fn, repeats):
    times, out = [], None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times), out


def bench_timing(method: str, problem: BinaryProblem, repeats: int = 3, epochs: int = EARLY_STOP_EPOCHS,
                 trades_config: TradesConfig | None = None, n_infer: int = 100,
                 seed: int = 0) -> TimingRecord:
    """Median train time and per-example inference time over ``repeats`` runs.

    For 1NN, building the index is its training time.
    """
    if repeats < 1:
        raise ConfigurationError("repeats must be >= 1")
    X = problem.test.pixels[:n_infer]
    if method == "1nn":
        train_t, index = _median_time(lambda: build_index(problem.train), repeats)
        infer_t, _ = _median_time(lambda: predict(index, X), repeats)
    elif method in ("early_stop", "standard"):
        train_t, (mlp, _) = _median_time(lambda: standard_train(problem, epochs, seed=seed), repeats)
        infer_t, _ = _median_time(lambda: mlp.predict(X), repeats)
    elif method == "trades":
        cfg = trades_config or TradesConfig.recommended(AttackBudget(math.inf, 0.3), epochs=epochs, seed=seed)
        train_t, (mlp, _) = _median_time(lambda: trades_train(problem, cfg), repeats)
        infer_t, _ = _median_time(lambda: mlp.predict(X), repeats)
    else:
        raise ConfigurationError(f"unknown bench method {method!r}")
    return TimingRecord(method, train_t, infer_t / max(len(X), 1), hardware_note())
