import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nncertify.errors import ConfigurationError, SolverError, ValidationError
from nncertify.knn import (NNSurrogate, attack_1nn_witness_stats, build_index, certificate_records,
                           certified_flags, certified_robust_accuracy, certify, class_distance,
                           exact_robust_accuracy, margin, margins, min_adversarial_l2,
                           min_adversarial_linf, predict, project_halfspaces_dykstra,
                           project_halfspaces_ldp, segment_flip_bounds, witness_histogram)
from nncertify.knn import exact as exact_mod
from nncertify.knn import geometry as geometry_mod
from nncertify.knn.geometry import flips_within
from nncertify.knn.index import Margin

from oracles import grid_min_flip, nn_labels


def line_index():
    return build_index(np.array([[0.0], [1.0]]), [0, 1])


def random_instance(rng, n=20, dim=2, spread=2.0):
    while True:
        X = rng.random((n, dim)) * spread
        y = rng.integers(0, 2, n)
        if 0 < y.sum() < n:
            return X, y


# ---------------------------------------------------------------- index

def test_minimal_index_and_duplicates():
    idx = build_index(np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 1.0]]), [0, 1, 1])
    assert len(idx) == 3 and idx.counts == (1, 2)


def test_index_rejects_nan_and_empty_class():
    with pytest.raises(ValidationError):
        build_index(np.array([[np.nan], [1.0]]), [0, 1])
    with pytest.raises(ConfigurationError):
        build_index(np.array([[0.0], [1.0]]), [0, 0])


def test_index_arrays_read_only():
    idx = line_index()
    with pytest.raises(ValueError):
        idx.vectors[0, 0] = 3.0


def test_predict_basic_geometry():
    idx = line_index()
    assert predict(idx, [0.4]) == 0
    assert predict(idx, [1.0]) == 1
    assert predict(idx, [0.5]) == 0  # equidistant: lowest index wins
    flipped = build_index(np.array([[1.0], [0.0]]), [1, 0])
    assert predict(flipped, [0.5]) == 1


def test_predict_dimension_mismatch():
    with pytest.raises(ValidationError):
        predict(line_index(), [0.1, 0.2])


def test_margin_line():
    m = margin(line_index(), [0.25], 0)
    assert (m.d_same, m.d_other, m.delta) == (0.25, 0.75, 0.5)
    assert margin(line_index(), [0.0], 0).d_same == 0.0


def test_margins_match_double_loop(rng):
    X, y = random_instance(rng, n=60, dim=7)
    idx = build_index(X, y)
    Q = rng.random((25, 7)) * 2
    yq = rng.integers(0, 2, 25)
    m = margins(idx, Q, yq)
    for k in range(len(Q)):
        same = min(np.linalg.norm(Q[k] - X[i]) for i in range(len(X)) if y[i] == yq[k])
        other = min(np.linalg.norm(Q[k] - X[i]) for i in range(len(X)) if y[i] != yq[k])
        assert m.d_same[k] == pytest.approx(same, abs=1e-12)
        assert m.d_other[k] == pytest.approx(other, abs=1e-12)
        assert y[m.nearest_same_id[k]] == yq[k] and y[m.nearest_other_id[k]] != yq[k]


def test_class_distance_cases(rng):
    assert class_distance(line_index()) == 1.0
    dup = build_index(np.array([[0.3], [0.3], [1.0]]), [0, 1, 1])
    assert class_distance(dup) == 0.0
    X, y = random_instance(rng, n=50, dim=5)
    ref = min(np.linalg.norm(X[i] - X[j]) for i in range(50) for j in range(50) if y[i] != y[j])
    assert class_distance(build_index(X, y)) == pytest.approx(ref, abs=1e-12)


# ---------------------------------------------------------------- certificates

def test_certify_examples():
    c = certify(Margin(0.25, 0.75, 0, 1), 4, True)
    assert c.radius_l2 == 0.25 and c.radius_linf == 0.125 and c.radius_lp == 0.25
    assert c.radius(1) == c.radius(2) == 0.25 and c.radius("inf") == 0.125
    for m, ok in ((Margin(1.0, 1.0, 0, 1), True), (Margin(1.0, 0.5, 0, 1), True),
                  (Margin(0.1, 2.0, 0, 1), False)):
        c = certify(m, 9, ok)
        assert c.radius_l2 == 0 and c.radius_linf == 0


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 10), st.floats(0, 10), st.integers(1, 4000))
def test_certificate_linf_relation(d_same, d_other, n):
    c = certify(Margin(d_same, d_other, 0, 1), n, True)
    assert c.radius_linf * math.sqrt(n) == pytest.approx(c.radius_l2, rel=1e-15, abs=0)
    assert c.radius_l2 >= 0


def test_certified_ra_eps_zero_is_clean_accuracy(rng):
    X, y = random_instance(rng, n=40, dim=4)
    idx = build_index(X, y)
    Q, yq = rng.random((30, 4)) * 2, rng.integers(0, 2, 30)
    clean = np.mean(np.atleast_1d(predict(idx, Q)) == yq)
    assert certified_robust_accuracy(idx, Q, 0.0, 2, yq) == clean
    assert certified_robust_accuracy(idx, Q, 100.0, 2, yq) == 0.0


def test_theorem2_on_random_train_sets(rng):
    for _ in range(20):
        X, y = random_instance(rng, n=30, dim=3)
        idx = build_index(X, y)
        d0 = class_distance(idx)
        if d0 == 0:
            continue
        assert certified_robust_accuracy(idx, X, 0.999 * d0 / 2, 2, y) == 1.0


def test_certified_flags_reject_bad_input(rng):
    idx = line_index()
    with pytest.raises(ConfigurationError):
        certified_flags(idx, np.array([[0.1]]), -1.0, 2, [0])
    with pytest.raises(ConfigurationError):
        certified_flags(idx, np.array([[0.1]]), 0.1, 3, [0])


def test_certificate_sound_under_random_perturbations(rng):
    X, y = random_instance(rng, n=40, dim=6)
    idx = build_index(X, y)
    Q, yq = rng.random((30, 6)) * 2, rng.integers(0, 2, 30)
    m = margins(idx, Q, yq)
    for k in range(len(Q)):
        c = certify(m[k], 6, m.predicted[k] == yq[k])
        if c.radius_l2 == 0:
            continue
        v = rng.standard_normal((500, 6))
        v *= c.radius_l2 * (1 - 1e-9) / np.linalg.norm(v, axis=1, keepdims=True)
        assert np.all(np.atleast_1d(predict(idx, Q[k] + v)) == yq[k])
        s = rng.choice([-1.0, 1.0], (500, 6)) * c.radius_linf * (1 - 1e-9)
        assert np.all(np.atleast_1d(predict(idx, Q[k] + s)) == yq[k])


def test_certificate_records_fields(rng):
    X, y = random_instance(rng, n=12, dim=2)
    idx = build_index(X, y)
    recs = certificate_records(idx, X[:3], y[:3], ids=[7, 8, 9], minimal=True)
    assert [r["example_id"] for r in recs] == [7, 8, 9]
    assert set(recs[0]) == {"example_id", "d_same", "d_other", "radius_l2", "radius_linf",
                            "min_l2", "min_linf", "anchor_id"}
    assert all(r["min_l2"] >= r["radius_l2"] - 1e-9 for r in recs)


# ---------------------------------------------------------------- projections

def test_dykstra_and_ldp_agree(rng):
    for _ in range(20):
        A = rng.standard_normal((8, 5))
        b = rng.standard_normal(8) + 1.0
        u_d, _, _ = project_halfspaces_dykstra(A, b, tol=1e-12, max_sweeps=100000)
        u_l = project_halfspaces_ldp(A, b)
        assert u_l is not None
        assert np.linalg.norm(u_d - u_l) < 1e-6
        assert np.all(A @ u_d <= b + 1e-8)


def test_ldp_reports_infeasible():
    A = np.array([[1.0], [-1.0]])
    assert project_halfspaces_ldp(A, np.array([-1.0, -1.0])) is None


# ---------------------------------------------------------------- exact geometry

def test_min_l2_line():
    r = min_adversarial_l2(line_index(), [0.0], 0)
    assert r.distance == pytest.approx(0.5, abs=1e-9)
    assert r.witness[0] == pytest.approx(0.5, abs=1e-6)
    assert predict(line_index(), [0.0] + r.witness) == 1
    assert min_adversarial_linf(line_index(), [0.0], 0).distance == pytest.approx(0.5, abs=1e-9)


def test_three_point_toy():
    idx = build_index(np.array([[0.0, 0.0], [2.0, 0.0], [1.0, 2.0]]), [0, 0, 1])
    x = np.array([0.0, 0.0])
    r2 = min_adversarial_l2(idx, x, 0)
    assert r2.distance == pytest.approx(math.sqrt(5) / 2, abs=1e-6)
    assert r2.distance == pytest.approx(grid_min_flip(idx.vectors, idx.labels, x, 0), abs=1e-3)
    rinf = min_adversarial_linf(idx, x, 0)
    assert rinf.distance == pytest.approx(grid_min_flip(idx.vectors, idx.labels, x, 0, np.inf), abs=1e-3)


def test_misclassified_query_has_zero_distance():
    r = min_adversarial_l2(line_index(), [0.9], 0)
    assert r.distance == 0 and np.all(r.witness == 0)


@pytest.mark.parametrize("solver", ["dykstra", "ldp"])
def test_min_l2_properties_high_dim(rng, solver):
    X, y = random_instance(rng, n=60, dim=10, spread=1.0)
    idx = build_index(X, y)
    Q, yq = rng.random((15, 10)), rng.integers(0, 2, 15)
    m = margins(idx, Q, yq)
    up2, upinf = segment_flip_bounds(idx, Q, yq)
    for k in range(len(Q)):
        r = min_adversarial_l2(idx, Q[k], yq[k], solver=solver)
        if m.predicted[k] != yq[k]:
            assert r.distance == 0
            continue
        assert r.distance >= m.delta[k] / 2 - 1e-9
        assert r.distance <= up2[k] + 1e-9
        assert np.linalg.norm(r.witness) <= r.distance * (1 + 1e-6) + 1e-9
        assert predict(idx, Q[k] + r.witness) != yq[k]
        v = rng.standard_normal((300, 10))
        v *= r.distance * (1 - 1e-4) / np.linalg.norm(v, axis=1, keepdims=True)
        assert np.all(np.atleast_1d(predict(idx, Q[k] + v)) == yq[k])


def test_solvers_agree(rng):
    X, y = random_instance(rng, n=50, dim=8, spread=1.0)
    idx = build_index(X, y)
    for q in rng.random((10, 8)):
        lab = int(predict(idx, q))
        a = min_adversarial_l2(idx, q, lab, solver="dykstra").distance
        b = min_adversarial_l2(idx, q, lab, solver="ldp").distance
        assert a == pytest.approx(b, abs=1e-5)


def test_min_linf_properties(rng):
    X, y = random_instance(rng, n=40, dim=6, spread=1.0)
    idx = build_index(X, y)
    Q, yq = rng.random((10, 6)), rng.integers(0, 2, 10)
    m = margins(idx, Q, yq)
    _, upinf = segment_flip_bounds(idx, Q, yq)
    for k in np.flatnonzero(m.predicted == yq):
        r = min_adversarial_linf(idx, Q[k], yq[k])
        assert r.distance >= m.delta[k] / 2 / math.sqrt(6) - 1e-9
        assert r.distance <= upinf[k] + 1e-9
        assert np.abs(r.witness).max() <= r.distance * (1 + 1e-6) + 1e-9
        assert predict(idx, Q[k] + r.witness) != yq[k]


def test_box_flag_keeps_witness_in_unit_cube(rng):
    X, y = random_instance(rng, n=30, dim=5, spread=1.0)
    idx = build_index(X, y)
    for q in rng.random((5, 5)):
        lab = int(predict(idx, q))
        for fn in (min_adversarial_l2, min_adversarial_linf):
            r = fn(idx, q, lab, box=True)
            if r.witness is not None:
                z = q + r.witness
                assert z.min() >= -1e-12 and z.max() <= 1 + 1e-12
                assert predict(idx, z) != lab
            assert r.distance >= fn(idx, q, lab).distance - 1e-7


ZIGZAG = np.array([[1.845956164708, 0.771692715348, 1], [1.249800655329, 1.719099345913, 0],
                   [1.659103127341, 1.346810046144, 0], [1.428141399501, 1.513870872561, 1],
                   [1.173972731538, 0.865255007761, 0], [1.797013901061, 0.320856507382, 1],
                   [0.257341031116, 0.625247726479, 0], [0.469442267438, 1.947348378597, 0],
                   [1.061170115378, 1.769191353267, 1], [1.104864139543, 0.434313301054, 0],
                   [1.749978533846, 1.763886590434, 0]])


def test_near_parallel_bisectors_regression():
    # small per-sweep change once stopped the projection early, leaving a violated halfspace
    idx = build_index(ZIGZAG[:, :2], ZIGZAG[:, 2].astype(int))
    x = np.array([0.3739551124624556, 1.2145044552651902])
    ref = grid_min_flip(idx.vectors, idx.labels, x, 0)
    assert min_adversarial_l2(idx, x, 0).distance == pytest.approx(ref, abs=1e-3)
    assert min_adversarial_l2(idx, x, 0, solver="ldp").distance == pytest.approx(ref, abs=1e-3)


def test_failed_anchor_is_not_silently_skipped(monkeypatch):
    idx = build_index(ZIGZAG[:, :2], ZIGZAG[:, 2].astype(int))
    x = np.array([0.3739551124624556, 1.2145044552651902])
    real = geometry_mod._solve_anchor_l2

    def flaky(prob, *args):
        if np.allclose(prob.b, ZIGZAG[8, :2]):
            raise SolverError("forced failure", 0.5)
        return real(prob, *args)
    monkeypatch.setattr(geometry_mod, "_solve_anchor_l2", flaky)
    with pytest.raises(SolverError):
        min_adversarial_l2(idx, x, 0)
    # the decision form still settles once a flip inside eps is found elsewhere
    assert flips_within(idx, x, 0, 0.7).distance <= 0.7


def test_grid_oracle_random_2d(rng):
    for _ in range(5):
        X, y = random_instance(rng, n=int(rng.integers(3, 21)))
        idx = build_index(X, y)
        x = rng.random(2) * 2
        lab = int(predict(idx, x))
        ref = grid_min_flip(X, y, x, lab)
        assert min_adversarial_l2(idx, x, lab).distance == pytest.approx(ref, abs=1e-3)


# ---------------------------------------------------------------- exact robust accuracy

def test_exact_ra_eps_zero_and_sandwich(rng):
    X, y = random_instance(rng, n=50, dim=6, spread=1.0)
    idx = build_index(X, y)
    Q, yq = rng.random((30, 6)), rng.integers(0, 2, 30)
    clean = np.mean(np.atleast_1d(predict(idx, Q)) == yq)
    assert exact_robust_accuracy(idx, Q, 0.0, 2, yq).fraction == clean
    for eps in (0.05, 0.1, 0.2):
        for p in (2, math.inf):
            e = p == 2 and eps or eps / 2
            ex = exact_robust_accuracy(idx, Q, e, p, yq)
            assert certified_robust_accuracy(idx, Q, e, p, yq) <= ex.fraction
            assert not ex.is_interval


def test_exact_ra_matches_min_distances(rng):
    X, y = random_instance(rng, n=40, dim=5, spread=1.0)
    idx = build_index(X, y)
    Q, yq = rng.random((20, 5)), rng.integers(0, 2, 20)
    d = np.array([min_adversarial_l2(idx, q, c).distance for q, c in zip(Q, yq)])
    for eps in (0.03, 0.08, 0.15):
        res = exact_robust_accuracy(idx, Q, eps, 2, yq)
        assert np.array_equal(res.robust == 1, d > eps)


def test_exact_ra_strict_at_boundary():
    res = exact_robust_accuracy(line_index(), np.array([[0.0]]), 0.5, 2, [0])
    assert res.fraction == 0.0
    res = exact_robust_accuracy(line_index(), np.array([[0.0]]), 0.4999, 2, [0])
    assert res.fraction == 1.0


def test_exact_ra_rejects_l1():
    with pytest.raises(ConfigurationError):
        exact_robust_accuracy(line_index(), np.array([[0.0]]), 0.1, 1, [0])


def test_solver_failure_gives_interval(monkeypatch, rng):
    X, y = random_instance(rng, n=30, dim=4, spread=1.0)
    idx = build_index(X, y)
    Q = X[:10] + 0.001
    lab = np.atleast_1d(predict(idx, Q))

    def boom(*a, **k):
        raise SolverError("no convergence")
    monkeypatch.setattr(exact_mod, "flips_within", boom)
    monkeypatch.setattr(exact_mod, "segment_flip_bounds",
                        lambda index, X, y, ids=None: (np.full(len(X), np.inf), np.full(len(X), np.inf)))
    eps = 1e-6
    res = exact_robust_accuracy(idx, Q, eps, 2, lab)
    cert = certified_robust_accuracy(idx, Q, eps, 2, lab)
    unresolved = np.sum(res.robust == -1)
    assert res.lower == cert and res.upper == cert + unresolved / 10
    assert unresolved == 0 or res.is_interval


# ---------------------------------------------------------------- histogram and surrogate

def test_witness_histogram():
    bins, counts = witness_histogram([np.zeros(5)])
    assert counts[0] == 5 and counts.sum() == 5 and len(bins) == 256
    assert bins[1] == pytest.approx(1 / 255)
    _, counts = witness_histogram([np.array([8 / 255, -1.0, 0.5 / 255])])
    assert counts[8] == 1 and counts[255] == 1 and counts[0] == 1


def test_witness_stats_mass(rng):
    X, y = random_instance(rng, n=20, dim=9, spread=1.0)
    idx = build_index(X, y)
    Q = rng.random((4, 9))
    lab = np.atleast_1d(predict(idx, Q))
    _, counts, res = attack_1nn_witness_stats(idx, Q, 2, lab)
    assert counts.sum() == 9 * sum(r.witness is not None for r in res)


def test_surrogate_argmax_and_gradient(rng):
    X, y = random_instance(rng, n=30, dim=4, spread=1.0)
    idx = build_index(X, y)
    s = NNSurrogate(idx, temperature=0.5)
    Q = rng.random((10, 4))
    assert np.array_equal(np.argmax(s.logits(Q), axis=1), s.predict(Q))
    d = rng.standard_normal((10, 2))
    g = s.input_grad(Q, d)
    h = 1e-6
    for j in range(4):
        e = np.zeros(4)
        e[j] = h
        fd = ((s.logits(Q + e) - s.logits(Q - e)) * d).sum(axis=1) / (2 * h)
        assert np.allclose(fd, g[:, j], atol=1e-5)
