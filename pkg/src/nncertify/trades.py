"""Training loops: standard cross-entropy, early stopping, TRADES and TRADES-Both.

Randomness is split into independent streams (initialisation, batch order,
inner-maximisation noise) derived from the seed, so a TRADES run and a
standard run with the same seed start from the same weights and see the
batches in the same order.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .attacks import AttackBudget, AttackConfig, empirical_robust_accuracy, evaluate_attack, project_ball
from .dataset import BinaryProblem, LabeledSet, subsample
from .errors import ConfigurationError, TrainingError
from .net import (DEFAULT_HIDDEN, GradientBundle, Mlp, backward, checkpoint_bytes, forward,
                  loss_boundary_grad, loss_ce_grad, sgd_step)

log = logging.getLogger(__name__)

EARLY_STOP_EPOCHS = 20
_STREAM_INIT, _STREAM_ORDER, _STREAM_NOISE = 0, 1, 2


def _stream(seed: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng([seed, purpose])


@dataclass(frozen=True)
class TradesConfig:
    eta1: float
    eta2: float = 0.01
    batch_size: int = 128
    inner_steps: int = 10
    lam: float = 6.0
    epochs: int = 20
    budget: AttackBudget = AttackBudget(math.inf, 0.3)
    seed: int = 0
    momentum: float = 0.9
    init_noise: float = 0.001
    hidden: tuple[int, ...] = DEFAULT_HIDDEN

    def __post_init__(self):
        if not self.lam > 0:
            raise ConfigurationError("lambda must be positive")
        if self.inner_steps < 1:
            raise ConfigurationError("TRADES needs at least one inner step (K >= 1)")
        if self.batch_size < 1:
            raise ConfigurationError("batch size must be >= 1")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if not self.eta1 > 0 and self.budget.eps > 0:
            raise ConfigurationError("eta1 must be positive")

    @classmethod
    def recommended(cls, budget: AttackBudget, **overrides) -> TradesConfig:
        """lambda 6, eta1 = eps/4, K 10, batch 128, eta2 0.01."""
        return cls(**{"eta1": budget.eps / 4, "budget": budget, **overrides})


@dataclass
class TrainReport:
    method: str
    epochs: int = 0
    train_accuracy: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    seconds: float = 0.0
    checkpoint_id: str = ""
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> TrainReport:
        return cls(**json.loads(text))


def _checkpoint_id(mlp: Mlp) -> str:
    import hashlib
    return hashlib.sha256(checkpoint_bytes(mlp)).hexdigest()[:16]


def _accuracy(mlp: Mlp, data: LabeledSet | None) -> float:
    if data is None:
        return float("nan")
    return float(np.mean(mlp.predict(data.pixels) == data.labels))


def _inner_max(mlp, x, clean_logits, budget, eta1, steps, noise, rng, hook):
    """Line 5-8: sign-gradient ascent on the boundary loss inside the ball."""
    delta = noise * rng.standard_normal(x.shape) if noise else np.zeros_like(x)
    delta = project_ball(np.clip(x + delta, 0, 1) - x, budget)
    for _ in range(steps):
        adv_logits, tape = forward(mlp, x + delta)
        _, _, d_adv = loss_boundary_grad(clean_logits, adv_logits)
        g = backward(mlp, tape, d_adv, need_params=False).d_input
        delta = project_ball(delta + eta1 * np.sign(g), budget)
        delta = np.clip(x + delta, 0.0, 1.0) - x
        if hook is not None:
            hook(x, x + delta, budget)
    return x + delta


def _composite_step(mlp, xb, yb, advs, lam, lr, momentum):
    """Line 10: gradient of CE(clean) + sum_j KL(clean || adv_j)/lambda, averaged."""
    m = len(xb)
    clean_logits, clean_tape = forward(mlp, xb)
    ce, d_clean = loss_ce_grad(clean_logits, yb)
    total = ce.copy()
    adv_tapes = []
    for adv in advs:
        adv_logits, tape = forward(mlp, adv)
        kl, dk_clean, dk_adv = loss_boundary_grad(clean_logits, adv_logits)
        total += kl / lam
        d_clean = d_clean + dk_clean / lam
        adv_tapes.append((tape, dk_adv / lam))
    grads = backward(mlp, clean_tape, d_clean / m)
    for tape, d in adv_tapes:
        grads = grads + backward(mlp, tape, d / m)
    loss = float(total.mean())
    if not np.isfinite(loss) or not np.all(np.isfinite(grads.flat())):
        return loss, False
    sgd_step(mlp, grads, lr, momentum)
    return loss, True


def _train(problem: BinaryProblem, method: str, epochs: int, lr: float, seed: int,
           batch_size: int, momentum: float, hidden, budgets=(), eta1s=(), lam=1.0,
           inner_steps=0, init_noise=0.0, hook=None, config=None):
    train = problem.train
    mlp = Mlp.create(train.n_features, hidden, 2, seed=int(_stream(seed, _STREAM_INIT).integers(2**31)))
    order_rng = _stream(seed, _STREAM_ORDER)
    noise_rng = _stream(seed, _STREAM_NOISE)
    report = TrainReport(method, config=config or {})
    start = time.perf_counter()
    X, y = train.pixels, train.labels
    for epoch in range(epochs):
        perm = order_rng.permutation(len(X))
        losses = []
        for lo in range(0, len(X), batch_size):
            idx = perm[lo:lo + batch_size]
            xb, yb = X[idx], y[idx]
            advs = []
            if budgets:
                clean_logits = forward(mlp, xb)[0]
                for budget, eta1 in zip(budgets, eta1s):
                    advs.append(_inner_max(mlp, xb, clean_logits, budget, eta1, inner_steps,
                                           init_noise, noise_rng, hook))
            snapshot = mlp.copy()
            loss, ok = _composite_step(mlp, xb, yb, advs, lam, lr, momentum)
            if not ok:
                raise TrainingError(f"{method}: loss became non-finite in epoch {epoch + 1}",
                                    checkpoint=snapshot,
                                    diagnostics={"epoch": epoch + 1, "batch_start": lo, "loss": loss})
            losses.append(loss * len(idx))
        report.loss.append(float(sum(losses) / len(X)))
        report.train_accuracy.append(_accuracy(mlp, train))
        report.val_accuracy.append(_accuracy(mlp, problem.test))
        report.epochs += 1
        log.info("%s %s epoch %d loss %.4f train acc %.4f", problem.name, method, epoch + 1,
                 report.loss[-1], report.train_accuracy[-1])
    report.seconds = time.perf_counter() - start
    report.checkpoint_id = _checkpoint_id(mlp)
    return mlp, report


def standard_train(problem: BinaryProblem, epochs: int = 100, lr: float = 0.01, seed: int = 0,
                   batch_size: int = 128, momentum: float = 0.9,
                   hidden=DEFAULT_HIDDEN) -> tuple[Mlp, TrainReport]:
    """Mini-batch SGD on cross-entropy."""
    if epochs < 0:
        raise ConfigurationError("epochs must be >= 0")
    cfg = {"epochs": epochs, "lr": lr, "seed": seed, "batch_size": batch_size, "momentum": momentum}
    return _train(problem, "standard", epochs, lr, seed, batch_size, momentum, hidden, config=cfg)


def early_stop_train(problem: BinaryProblem, lr: float = 0.01, seed: int = 0, batch_size: int = 128,
                     momentum: float = 0.9, hidden=DEFAULT_HIDDEN) -> tuple[Mlp, TrainReport]:
    mlp, report = standard_train(problem, EARLY_STOP_EPOCHS, lr, seed, batch_size, momentum, hidden)
    report.method = "early_stop"
    return mlp, report


def _trades_cfg_dict(config: TradesConfig, **extra):
    d = asdict(config)
    d["budget"] = {"p": str(config.budget.p), "eps": config.budget.eps}
    d["hidden"] = list(config.hidden)
    d.update(extra)
    return d


def trades_train(problem: BinaryProblem, config: TradesConfig, hook=None) -> tuple[Mlp, TrainReport]:
    """Adversarial training with the KL boundary term weighted by 1/lambda.

    ``hook(x, x_adv, budget)`` is called after every inner step.
    """
    return _train(problem, "trades", config.epochs, config.eta2, config.seed, config.batch_size,
                  config.momentum, config.hidden, (config.budget,), (config.eta1,), config.lam,
                  config.inner_steps, config.init_noise, hook, _trades_cfg_dict(config))


def trades_both_train(problem: BinaryProblem, config: TradesConfig, budget2: AttackBudget,
                      eta1_2: float | None = None, hook=None) -> tuple[Mlp, TrainReport]:
    """Two inner maximisations per example (config.budget and budget2), both KL terms in the loss."""
    if {config.budget.p, budget2.p} != {math.inf, 2.0}:
        raise ConfigurationError("TRADES-Both needs one l-inf and one l2 budget")
    eta2nd = eta1_2 if eta1_2 is not None else budget2.eps / 4
    mlp, report = _train(problem, "trades_both", config.epochs, config.eta2, config.seed,
                         config.batch_size, config.momentum, config.hidden,
                         (config.budget, budget2), (config.eta1, eta2nd), config.lam,
                         config.inner_steps, config.init_noise, hook,
                         _trades_cfg_dict(config, budget2={"p": str(budget2.p), "eps": budget2.eps}))
    return mlp, report


def holdout_split(data: LabeledSet, fraction: float, seed: int) -> tuple[LabeledSet, LabeledSet]:
    """Stratified split into (fit, held-out)."""
    n_hold = max(1, int(round(fraction * len(data))))
    held = subsample(data, n_hold, seed)
    mask = np.ones(len(data), dtype=bool)
    pos = {int(i): k for k, i in enumerate(data.ids)}
    mask[[pos[int(i)] for i in held.ids]] = False
    return data.take(np.flatnonzero(mask)), held


def default_objective(budget: AttackBudget, attack: AttackConfig | None = None):
    """Empirical l-inf robust accuracy under APGD-CE on the held-out split."""
    attack = attack or AttackConfig(steps=50, variant="apgd_ce")

    def objective(mlp: Mlp, held: LabeledSet) -> float:
        outs = evaluate_attack(mlp, held.pixels, held.labels, budget, attack, held.ids)
        return empirical_robust_accuracy(outs)
    return objective


def hyperparameter_sweep(problem: BinaryProblem, base: TradesConfig, grid: dict, objective=None,
                         holdout: float = 0.2):
    """Train one TRADES model per grid point and keep the argmax of ``objective``.

    ``grid`` maps TradesConfig field names to candidate values (at most 24
    combinations). Returns (best_config, rows) where rows are dicts holding
    the grid values and the objective.
    """
    keys = sorted(grid)
    combos = list(itertools.product(*(grid[k] for k in keys)))
    if not combos:
        raise ConfigurationError("empty hyperparameter grid")
    if len(combos) > 24:
        raise ConfigurationError(f"grid has {len(combos)} points; at most 24 are allowed")
    objective = objective or default_objective(base.budget)
    fit, held = holdout_split(problem.train, holdout, base.seed)
    sub = BinaryProblem(problem.class_a, problem.class_b, fit, held, problem.name)
    rows, best, best_val = [], None, -math.inf
    for values in combos:
        cfg = replace(base, **dict(zip(keys, values)))
        mlp, _ = trades_train(sub, cfg)
        val = float(objective(mlp, held))
        rows.append({**dict(zip(keys, values)), "objective": val})
        if val > best_val:
            best, best_val = cfg, val
    return best, rows


def sweep_table_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def save_report(report: TrainReport, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(report.to_json())
    tmp.replace(path)
