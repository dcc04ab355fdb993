import json
import math
import time

import numpy as np
import pytest

from nncertify.attacks import AttackBudget, AttackConfig, empirical_robust_accuracy, evaluate_attack
from nncertify.dataset import BinaryProblem, binary_problem
from nncertify.errors import ConfigurationError, TrainingError
from nncertify.toy import make_toy2d
from nncertify.trades import (TradesConfig, TrainReport, early_stop_train, holdout_split,
                              hyperparameter_sweep, save_report, standard_train, sweep_table_csv,
                              trades_both_train, trades_train)

from conftest import make_set

LINF = AttackBudget(math.inf, 0.05)
SMALL = dict(batch_size=32, hidden=(16, 16))


@pytest.fixture(scope="module")
def separable():
    rng = np.random.default_rng(3)
    a = rng.uniform(0.0, 0.35, (40, 2))
    b = rng.uniform(0.65, 1.0, (40, 2))
    pts = np.vstack([a, b])
    labels = np.repeat([0, 1], 40)
    data = make_set(pts, labels)
    return BinaryProblem(0, 1, data, data, "a_vs_b")


@pytest.fixture(scope="module")
def toy():
    return make_toy2d(0)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        TradesConfig(eta1=0.01, inner_steps=0)
    with pytest.raises(ConfigurationError):
        TradesConfig(eta1=0.01, lam=0.0)
    with pytest.raises(ConfigurationError):
        TradesConfig(eta1=0.01, batch_size=0)
    cfg = TradesConfig.recommended(AttackBudget(math.inf, 0.3))
    assert (cfg.lam, cfg.eta1, cfg.inner_steps, cfg.batch_size, cfg.eta2) == (6.0, 0.075, 10, 128, 0.01)


def test_separable_reaches_full_accuracy(separable):
    net, report = standard_train(separable, epochs=200, hidden=(16, 16), batch_size=16)
    assert report.train_accuracy[-1] == 1.0
    assert report.epochs == len(report.loss) == 200


def test_zero_epochs_returns_initial_model(separable):
    a, ra = standard_train(separable, epochs=0, hidden=(8,))
    b, rb = trades_train(separable, TradesConfig.recommended(LINF, epochs=0, hidden=(8,)))
    assert ra.epochs == 0 and ra.loss == []
    assert np.array_equal(a.flat(), b.flat())


def test_training_is_deterministic(toy):
    a, _ = standard_train(toy, epochs=3, **SMALL)
    b, _ = standard_train(toy, epochs=3, **SMALL)
    assert np.array_equal(a.flat(), b.flat())
    cfg = TradesConfig.recommended(LINF, epochs=2, **SMALL)
    assert np.array_equal(trades_train(toy, cfg)[0].flat(), trades_train(toy, cfg)[0].flat())


def test_early_stop_is_standard_with_20_epochs(toy):
    a, ra = early_stop_train(toy, **SMALL)
    b, _ = standard_train(toy, epochs=20, **SMALL)
    assert np.array_equal(a.flat(), b.flat())
    assert ra.epochs == 20 and ra.method == "early_stop"


def test_huge_lambda_matches_standard(toy):
    cfg = TradesConfig(eta1=0.0125, eta2=0.01, inner_steps=1, lam=1e9, epochs=3, budget=LINF,
                       init_noise=0.0, **SMALL)
    a, _ = trades_train(toy, cfg)
    b, _ = standard_train(toy, epochs=3, lr=0.01, **SMALL)
    assert np.linalg.norm(a.flat() - b.flat()) <= 1e-8 * np.linalg.norm(b.flat())


@pytest.mark.parametrize("budget", [AttackBudget(math.inf, 0.05), AttackBudget(2, 0.07)])
def test_inner_iterates_stay_in_ball(toy, budget):
    worst = []

    def hook(x, adv, b):
        d = adv - x
        n = np.abs(d).max(axis=1) if b.p == math.inf else np.linalg.norm(d, axis=1)
        worst.append(n.max() / b.eps)
        assert adv.min() >= 0 and adv.max() <= 1
    trades_train(toy, TradesConfig.recommended(budget, epochs=2, **SMALL), hook=hook)
    assert worst and max(worst) <= 1 + 1e-9


def test_both_budgets_respected_and_counted(toy):
    seen = {math.inf: [], 2.0: []}

    def hook(x, adv, b):
        d = adv - x
        n = np.abs(d).max(axis=1) if b.p == math.inf else np.linalg.norm(d, axis=1)
        seen[b.p].append(n.max() <= b.eps * (1 + 1e-9))
    cfg = TradesConfig.recommended(LINF, epochs=2, **SMALL)
    trades_both_train(toy, cfg, AttackBudget(2, 0.07), hook=hook)
    single = []
    trades_train(toy, cfg, hook=lambda x, a, b: single.append(1))
    assert all(seen[math.inf]) and all(seen[2.0])
    assert len(seen[math.inf]) == len(seen[2.0]) == len(single)


def test_both_needs_mixed_norms(toy):
    with pytest.raises(ConfigurationError):
        trades_both_train(toy, TradesConfig.recommended(LINF), AttackBudget(math.inf, 0.1))


def test_both_with_empty_second_ball_is_trades(toy):
    cfg = TradesConfig.recommended(LINF, epochs=3, init_noise=0.0, **SMALL)
    a, _ = trades_both_train(toy, cfg, AttackBudget(2, 0.0))
    b, _ = trades_train(toy, cfg)
    assert np.allclose(a.flat(), b.flat(), rtol=0, atol=1e-12)
    cfg = TradesConfig.recommended(LINF, epochs=3, **SMALL)
    _, ra = trades_both_train(toy, cfg, AttackBudget(2, 0.0))
    _, rb = trades_train(toy, cfg)
    assert np.allclose(ra.loss, rb.loss, rtol=0.05)


def test_both_costs_about_twice(toy):
    cfg = TradesConfig.recommended(LINF, epochs=10, batch_size=32, hidden=(64, 64))
    ratios = []
    for _ in range(5):
        t0 = time.perf_counter()
        trades_train(toy, cfg)
        t1 = time.perf_counter()
        trades_both_train(toy, cfg, AttackBudget(2, 0.07))
        ratios.append((time.perf_counter() - t1) / (t1 - t0))
    assert 2 * 0.7 <= float(np.median(ratios)) <= 2 * 1.3


def test_composite_loss_decreases_on_toy(toy):
    _, report = trades_train(toy, TradesConfig.recommended(LINF, epochs=60, batch_size=32, hidden=(32, 32)))
    ma = np.convolve(report.loss, np.ones(5) / 5, "valid")
    # non-strict: each moving-average step may rise by at most 0.1% of its value
    assert np.all(np.diff(ma) <= 1e-3 * ma[1:])
    assert ma[-1] < 0.5 * ma[0]


def test_divergence_raises_with_snapshot(toy):
    with pytest.raises(TrainingError) as info:
        standard_train(toy, epochs=50, lr=1e155, **SMALL)
    assert info.value.checkpoint is not None
    assert np.all(np.isfinite(info.value.checkpoint.flat()))
    assert "epoch" in info.value.diagnostics


def test_report_json_round_trip(tmp_path, toy):
    _, report = trades_train(toy, TradesConfig.recommended(LINF, epochs=2, **SMALL))
    path = tmp_path / "r.json"
    save_report(report, path)
    back = TrainReport.from_json(path.read_text())
    assert back == report and back.epochs == 2 == len(back.val_accuracy)
    assert json.loads(path.read_text())["config"]["lam"] == 6.0


def test_holdout_split_partitions(toy):
    fit, held = holdout_split(toy.train, 0.2, 0)
    assert len(held) == 40 and len(fit) == 160
    assert not set(fit.ids) & set(held.ids)


def test_sweep_grid_of_one(toy):
    base = TradesConfig.recommended(LINF, epochs=2, **SMALL)
    best, rows = hyperparameter_sweep(toy, base, {"lam": [3.0]}, objective=lambda m, h: 0.5)
    assert best.lam == 3.0 and rows == [{"lam": 3.0, "objective": 0.5}]


def test_sweep_argmax_and_reproducible(toy):
    base = TradesConfig.recommended(LINF, epochs=3, **SMALL)
    grid = {"lam": [1.0, 6.0], "eta2": [0.01, 0.05]}
    best, rows = hyperparameter_sweep(toy, base, grid)
    again, rows2 = hyperparameter_sweep(toy, base, grid)
    assert rows == rows2 and best == again
    top = max(r["objective"] for r in rows)
    assert {"lam": best.lam, "eta2": best.eta2, "objective": top} in rows
    assert sweep_table_csv(rows).splitlines()[0] == "eta2,lam,objective"


def test_sweep_limits(toy):
    base = TradesConfig.recommended(LINF)
    with pytest.raises(ConfigurationError):
        hyperparameter_sweep(toy, base, {"lam": list(range(1, 26))})
    with pytest.raises(ConfigurationError):
        hyperparameter_sweep(toy, base, {"lam": []})


@pytest.mark.xfail(strict=True, reason="toy nets are already attack-robust; measured gap about +0.03")
def test_trades_beats_standard_on_toy_by_0_2(toy):
    budget = AttackBudget(math.inf, 0.05)
    std, _ = standard_train(toy, epochs=200, batch_size=32, hidden=(32, 32))
    trd, _ = trades_train(toy, TradesConfig.recommended(budget, epochs=200, batch_size=32, hidden=(32, 32)))
    attack = AttackConfig(steps=100, variant="apgd_ce")
    X, y = toy.train.pixels, toy.train.labels
    ra = [empirical_robust_accuracy(evaluate_attack(m, X, y, budget, attack)) for m in (std, trd)]
    assert ra[1] >= ra[0] + 0.2


# ---------------------------------------------------------------- MNIST

@pytest.fixture(scope="module")
def mnist_1v7(mnist):
    return binary_problem(*mnist, 1, 7, test_cap=None, seed=0)


@pytest.mark.mnist
def test_early_stop_mnist_clean_accuracy(mnist_1v7):
    net, _ = early_stop_train(mnist_1v7)
    assert np.mean(net.predict(mnist_1v7.test.pixels) == mnist_1v7.test.labels) >= 0.99


@pytest.mark.mnist
@pytest.mark.slow
def test_standard_mnist_clean_accuracy(mnist_1v7):
    net, _ = standard_train(mnist_1v7)
    assert np.mean(net.predict(mnist_1v7.test.pixels) == mnist_1v7.test.labels) > 0.98


@pytest.mark.mnist
@pytest.mark.slow
def test_trades_both_min_ra_trend(mnist):
    linf, l2 = AttackBudget(math.inf, 0.3), AttackBudget(2, 8.4)
    attack = AttackConfig(steps=50, variant="apgd_ce")
    plain, both = [], []
    for a, b in ((0, 1), (1, 7), (3, 8), (4, 9), (2, 5)):
        prob = binary_problem(*mnist, a, b, test_cap=100, train_cap=1000, seed=0)
        cfg = TradesConfig.recommended(linf, epochs=5)
        X, y = prob.test.pixels, prob.test.labels
        for store, (net, _) in ((plain, trades_train(prob, cfg)),
                                (both, trades_both_train(prob, cfg, l2))):
            store.append(min(empirical_robust_accuracy(evaluate_attack(net, X, y, bud, attack))
                             for bud in (linf, l2)))
    assert np.mean(both) >= np.mean(plain)
