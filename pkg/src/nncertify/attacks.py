"""PGD and APGD-CE under l1/l2/l-inf budgets, plus ball projections.

A model is anything with ``logits(X)``, ``input_grad(X, d_logits)`` and
``predict(X)`` over batches; both ``net.Mlp`` and ``knn.NNSurrogate`` qualify.
Attacks run batched, but every example draws its random numbers from its own
stream seeded by (seed, example_id), so results do not depend on batching.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .net import loss_ce_grad

VARIANTS = ("pgd", "apgd_ce")
APGD_CHECKPOINTS = (0.22, 0.44, 0.66, 0.88)
APGD_MOMENTUM = 0.75
APGD_RHO = 0.75


@dataclass(frozen=True)
class AttackBudget:
    p: float
    eps: float

    def __post_init__(self):
        p = self.p
        if isinstance(p, str):
            p = math.inf if p.lower() in ("inf", "linf") else float(p)
        if p not in (1, 2, math.inf):
            raise ConfigurationError(f"unsupported norm {self.p}")
        if not self.eps >= 0:
            raise ConfigurationError("eps must be non-negative")
        object.__setattr__(self, "p", float(p))
        object.__setattr__(self, "eps", float(self.eps))


@dataclass(frozen=True)
class AttackConfig:
    steps: int = 40
    step_size: float | None = None
    restarts: int = 1
    seed: int = 0
    box_constrain: bool = True
    variant: str = "pgd"
    init_noise: float = 0.001

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigurationError("steps must be >= 1")
        if self.step_size is not None and not self.step_size > 0:
            raise ConfigurationError("step_size must be positive")
        if self.restarts < 1:
            raise ConfigurationError("restarts must be >= 1")
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown attack variant {self.variant!r}")

    def resolved_step(self, eps: float) -> float:
        # the Madry et al. rule of thumb: the whole budget covered 2.5 times
        return self.step_size if self.step_size is not None else 2.5 * eps / self.steps


@dataclass
class AttackOutcome:
    success: bool
    adversarial: np.ndarray | None
    queries: int
    final_loss: float = float("nan")
    best: np.ndarray | None = None
    fallbacks: int = 0
    example_id: int = 0

    def norms(self, x) -> tuple[float, float]:
        point = self.adversarial if self.adversarial is not None else self.best
        if point is None:
            return 0.0, 0.0
        d = point - np.asarray(x, dtype=np.float64)
        return float(np.abs(d).max()), float(np.linalg.norm(d))


def _project_l1(v, eps):
    # sorted-threshold projection onto the l1 ball, row by row
    out = v.copy()
    a = np.abs(v)
    over = a.sum(axis=1) > eps
    if not np.any(over):
        return out
    if eps == 0:
        out[over] = 0.0
        return out
    u = -np.sort(-a[over], axis=1)
    css = np.cumsum(u, axis=1)
    k = np.arange(1, u.shape[1] + 1)
    rho = np.maximum(np.sum(u * k > css - eps, axis=1), 1)
    theta = (css[np.arange(len(u)), rho - 1] - eps) / rho
    out[over] = np.sign(v[over]) * np.maximum(a[over] - theta[:, None], 0.0)
    return out


def project_ball(v, budget: AttackBudget) -> np.ndarray:
    """Euclidean projection of perturbation(s) onto the budget's ball."""
    v = np.asarray(v, dtype=np.float64)
    rows = np.atleast_2d(v)
    eps = budget.eps
    if budget.p == math.inf:
        out = np.clip(rows, -eps, eps)
    elif budget.p == 2:
        norm = np.linalg.norm(rows, axis=1, keepdims=True)
        scale = np.where(norm > eps, eps / np.maximum(norm, 1e-300), 1.0)
        out = rows * scale
    else:
        out = _project_l1(rows, eps)
    return out.reshape(v.shape)


def _direction(g, p, rngs, active):
    """Steepest-ascent direction per row; zero rows get a random direction."""
    g = g.copy()
    zero = ~np.any(g != 0, axis=1)
    for i in np.flatnonzero(zero):
        g[i] = rngs[active[i]].standard_normal(g.shape[1])
    if p == math.inf:
        d = np.sign(g)
    elif p == 2:
        d = g / np.linalg.norm(g, axis=1, keepdims=True)
    else:
        d = np.zeros_like(g)
        j = np.argmax(np.abs(g), axis=1)
        r = np.arange(len(g))
        d[r, j] = np.sign(g[r, j])
    return d, zero


def _random_in_ball(rng, n, budget):
    if budget.p == math.inf:
        return rng.uniform(-budget.eps, budget.eps, n)
    if budget.p == 2:
        d = rng.standard_normal(n)
        return d / np.linalg.norm(d) * budget.eps * rng.random() ** (1.0 / n)
    d = rng.laplace(size=n)
    return d / np.abs(d).sum() * budget.eps * rng.random() ** (1.0 / n)


class _State:
    """Bookkeeping shared by both attack loops over a batch."""

    def __init__(self, model, X, y, ids, budget, config):
        self.model, self.X, self.y, self.budget, self.config = model, X, y, budget, config
        self.n = len(X)
        self.success = np.zeros(self.n, dtype=bool)
        self.adv = [None] * self.n
        self.best = X.copy()
        self.best_loss = np.full(self.n, -np.inf)
        self.queries = np.zeros(self.n, dtype=np.int64)
        self.fallbacks = np.zeros(self.n, dtype=np.int64)
        self.rngs = [np.random.default_rng([config.seed, int(i)]) for i in ids]

    def place(self, rows, delta):
        """Project a perturbation, apply the box, return (points, perturbations)."""
        delta = project_ball(delta, self.budget)
        pts = self.X[rows] + delta
        if self.config.box_constrain:
            np.clip(pts, 0.0, 1.0, out=pts)
        return pts, pts - self.X[rows]

    def loss_grad(self, rows, pts):
        logits = self.model.logits(pts)
        loss, d = loss_ce_grad(logits, self.y[rows])
        self.queries[rows] += 1
        return loss, self.model.input_grad(pts, d), np.argmax(logits, axis=1)

    def record(self, rows, pts, loss, pred):
        better = loss > self.best_loss[rows]
        self.best_loss[rows[better]] = loss[better]
        self.best[rows[better]] = pts[better]
        for k in np.flatnonzero(pred != self.y[rows]):
            # the final verdict always comes from the model's own predict()
            i = rows[k]
            if not self.success[i] and self.model.predict(pts[k:k + 1])[0] != self.y[i]:
                self.success[i] = True
                self.adv[i] = pts[k].copy()

    def start(self, rows, restart):
        n_feat = self.X.shape[1]
        delta = np.empty((len(rows), n_feat))
        for k, i in enumerate(rows):
            rng = self.rngs[i]
            if restart == 0:
                delta[k] = self.config.init_noise * rng.standard_normal(n_feat)
            else:
                delta[k] = _random_in_ball(rng, n_feat, self.budget)
        return self.place(rows, delta)

    def outcomes(self, ids):
        out = []
        for i in range(self.n):
            out.append(AttackOutcome(bool(self.success[i]), self.adv[i], int(self.queries[i]),
                                     float(self.best_loss[i]), self.best[i].copy(),
                                     int(self.fallbacks[i]), int(ids[i])))
        return out


def _pgd_run(st: _State, rows, restart):
    eta = st.config.resolved_step(st.budget.eps)
    pts, delta = st.start(rows, restart)
    for step in range(st.config.steps + 1):
        loss, g, pred = st.loss_grad(rows, pts)
        st.record(rows, pts, loss, pred)
        alive = ~st.success[rows]
        rows, pts, delta, g = rows[alive], pts[alive], delta[alive], g[alive]
        if len(rows) == 0 or step == st.config.steps:
            return
        d, zero = _direction(g, st.budget.p, st.rngs, rows)
        st.fallbacks[rows[zero]] += 1
        pts, delta = st.place(rows, delta + eta * d)


def _apgd_run(st: _State, rows, restart):
    n_iter = st.config.steps
    marks = sorted({max(1, math.ceil(f * n_iter)) for f in APGD_CHECKPOINTS})
    p = st.budget.p
    eta = np.full(len(rows), 2.0 * st.budget.eps)
    x, _ = st.start(rows, restart)
    loss, g, pred = st.loss_grad(rows, x)
    st.record(rows, x, loss, pred)
    x_prev = x.copy()
    cur_loss = loss
    # per-example best within this run (restart-from-best uses it)
    run_best, run_best_loss = x.copy(), loss.copy()
    increases = np.zeros(len(rows), dtype=np.int64)
    last_mark, eta_at_mark, best_at_mark = 0, eta.copy(), run_best_loss.copy()
    for k in range(n_iter):
        alive = ~st.success[rows]
        if not np.any(alive):
            return
        d, zero = _direction(g, p, st.rngs, rows)
        st.fallbacks[rows[zero & alive]] += 1
        z, _ = st.place(rows, x - st.X[rows] + eta[:, None] * d)
        alpha = 1.0 if k == 0 else APGD_MOMENTUM
        step = alpha * (z - x) + (1.0 - alpha) * (x - x_prev)
        x_new, _ = st.place(rows, x + step - st.X[rows])
        x_prev, x = x, x_new
        # frozen (already successful) rows are carried along but not charged
        loss, g, pred = st.loss_grad(rows, x)
        st.queries[rows[~alive]] -= 1
        st.record(rows[alive], x[alive], loss[alive], pred[alive])
        increases += loss > cur_loss
        cur_loss = loss
        better = loss > run_best_loss
        run_best[better], run_best_loss[better] = x[better], loss[better]
        if k + 1 in marks:
            span = k + 1 - last_mark
            stalled = increases < APGD_RHO * span
            stuck = (eta == eta_at_mark) & (run_best_loss == best_at_mark)
            halve = stalled | stuck
            eta[halve] *= 0.5
            x[halve] = run_best[halve]
            x_prev[halve] = run_best[halve]
            if np.any(halve):
                loss_h, g_h, _ = st.loss_grad(rows[halve], x[halve])
                st.queries[rows[halve & ~alive]] -= 1
                cur_loss[halve], g[halve] = loss_h, g_h
            increases[:] = 0
            last_mark, eta_at_mark, best_at_mark = k + 1, eta.copy(), run_best_loss.copy()


def run_attack(model, X, y, budget: AttackBudget, config: AttackConfig, ids=None) -> list[AttackOutcome]:
    """Attack a batch; returns one outcome per row of X."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.broadcast_to(np.asarray(y, dtype=np.int64), (len(X),)).copy()
    ids = np.arange(len(X)) if ids is None else np.asarray(ids, dtype=np.int64)
    st = _State(model, X, y, ids, budget, config)
    pred = np.asarray(model.predict(X))
    st.success[:] = pred != y
    for i in np.flatnonzero(st.success):
        st.adv[i] = X[i].copy()
    if budget.eps > 0:
        runner = _pgd_run if config.variant == "pgd" else _apgd_run
        for r in range(config.restarts):
            rows = np.flatnonzero(~st.success)
            if len(rows) == 0:
                break
            runner(st, rows, r)
    return st.outcomes(ids)


def pgd(model, x, label, budget: AttackBudget, config: AttackConfig = AttackConfig(),
        example_id: int = 0) -> AttackOutcome:
    cfg = config if config.variant == "pgd" else replace(config, variant="pgd")
    return run_attack(model, x, [label], budget, cfg, [example_id])[0]


def apgd_ce(model, x, label, budget: AttackBudget, config: AttackConfig | None = None,
            example_id: int = 0) -> AttackOutcome:
    cfg = config or AttackConfig(steps=100, variant="apgd_ce")
    if cfg.variant != "apgd_ce":
        cfg = replace(cfg, variant="apgd_ce")
    return run_attack(model, x, [label], budget, cfg, [example_id])[0]


def evaluate_attack(model, X, y, budget: AttackBudget, config: AttackConfig, ids=None,
                    transcript=None, batch_size: int = 512) -> list[AttackOutcome]:
    """Attack every example; optionally write a JSON-lines transcript."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64)
    ids = np.arange(len(X)) if ids is None else np.asarray(ids, dtype=np.int64)
    outcomes = []
    for lo in range(0, len(X), batch_size):
        s = slice(lo, lo + batch_size)
        outcomes += run_attack(model, X[s], y[s], budget, config, ids[s])
    if transcript is not None:
        write_transcript(outcomes, X, transcript)
    return outcomes


def empirical_robust_accuracy(outcomes) -> float:
    """1 - success rate; initially misclassified examples count as successes."""
    if not outcomes:
        raise ConfigurationError("no outcomes to aggregate")
    return 1.0 - sum(o.success for o in outcomes) / len(outcomes)


def write_transcript(outcomes, X, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as f:
        for o, x in zip(outcomes, X):
            linf, l2 = o.norms(x)
            f.write(json.dumps({"example_id": o.example_id, "success": o.success,
                                "final_loss": o.final_loss, "queries": o.queries,
                                "linf_norm": linf, "l2_norm": l2}) + "\n")
    tmp.replace(path)
