"""Exact minimal adversarial perturbations for the 1NN classifier.

For a query x of class y, a wrong-class training point b becomes the nearest
neighbour exactly on the polyhedron

    P_b = { z : 2 z.(a - b) <= |a|^2 - |b|^2  for every correct-class a }

(the Voronoi cell of b against the correct class). The smallest perturbation
that flips the prediction is min_b dist_p(x, P_b).

Each anchor is handled by a cutting-plane loop: project x onto the
intersection of a small working set of bisector halfspaces, add the
constraints the projection violates, and repeat. Every relaxed projection is a
lower bound for the anchor, so an anchor is abandoned as soon as its bound
passes the current cutoff. The l2 projection onto the working set uses
Dykstra's cyclic halfspace projections (default) or the Lawson-Hanson
least-distance program; the l-infinity counterpart is a linear program.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, sparse

from ..errors import ConfigurationError, SolverError
from .index import NNIndex, _as_queries, sq_distances

DYKSTRA_TOL = 1e-6
DYKSTRA_MAX_SWEEPS = 10_000
_FEAS_TOL = {"dykstra": 1e-7, "ldp": 1e-10}
_SEED_CONSTRAINTS = 4
_CUTS_PER_ROUND = 16
_MAX_ROUNDS = 500
_LB_NEIGHBOURS = 16


@dataclass
class MinPerturbation:
    """Minimal flipping perturbation.

    ``distance`` is the infimum over flipping perturbations (``inf`` when no
    feasible flip exists under the box constraint). ``witness`` is a concrete
    perturbation that flips the prediction; its norm exceeds ``distance`` only
    by the small push used to break boundary ties. When the search ran against
    a cutoff and found nothing below it, ``exact`` is False and ``distance`` is
    a lower bound greater than the cutoff.
    """

    distance: float
    witness: np.ndarray | None
    anchor_id: int
    p: float
    exact: bool = True
    anchors_solved: int = 0
    notes: list = field(default_factory=list)


def project_halfspaces_dykstra(normals, offsets, tol=DYKSTRA_TOL, max_sweeps=DYKSTRA_MAX_SWEEPS,
                               warm=None):
    """Least-norm u with normals @ u <= offsets (unit-norm rows).

    Dykstra's algorithm for halfspaces: cyclic projections with one
    correction term per set. Each correction is a non-negative multiple of
    its normal, so the iteration is carried out on those multipliers with the
    Gram matrix of the normals; the iterates are identical to the primal
    version.

    Returns (u, multipliers, sweeps). Stops once the KKT conditions hold to
    ``tol`` (scaled by max(1, |u|)): no halfspace violated by more than that,
    and every halfspace with a positive multiplier tight to within it. Raises
    SolverError when that has not happened after ``max_sweeps`` sweeps.
    """
    normals = np.asarray(normals, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.float64)
    m = len(offsets)
    gram = normals @ normals.T
    lam = np.zeros(m) if warm is None else np.array(warm, dtype=np.float64)
    w = -gram @ lam  # w = normals @ u with u = -normals.T @ lam
    for sweep in range(1, max_sweeps + 1):
        for i in range(m):
            step = (w[i] - offsets[i]) / gram[i, i]
            new = lam[i] + step
            if new < 0.0:
                new = 0.0
            change = new - lam[i]
            if change != 0.0:
                lam[i] = new
                w -= change * gram[:, i]
        scale = tol * max(1.0, math.sqrt(max(lam @ gram @ lam, 0.0)))
        gap = w - offsets
        if gap.max(initial=-np.inf) <= scale and np.all(gap[lam > 0] >= -scale):
            return -normals.T @ lam, lam, sweep
    u = -normals.T @ lam
    raise SolverError(f"Dykstra projection did not converge in {max_sweeps} sweeps",
                      witness=u)


def project_halfspaces_ldp(normals, offsets):
    """Least-norm u with normals @ u <= offsets via the least-distance program
    solved as a non-negative least squares problem. Returns None if the
    halfspaces have empty intersection."""
    normals = np.asarray(normals, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.float64)
    n = normals.shape[1]
    # min |u| s.t. (-normals) u >= -offsets
    E = np.vstack([-normals.T, -offsets[None, :]])
    e = np.zeros(n + 1)
    e[-1] = 1.0
    w, _ = optimize.nnls(E, e, maxiter=50 * E.shape[1] + 100)
    r = E @ w - e
    if abs(r[-1]) < 1e-13 or np.linalg.norm(r) < 1e-13:
        return None
    return -r[:-1] / r[-1]


class _AnchorProblem:
    """Bisector constraints of anchor b against a pool of correct-class points,
    expressed in perturbation coordinates u = z - x as rows n.u <= c with unit
    normals."""

    def __init__(self, x, b, pool, pool_sq_dist, b_sq_dist, box):
        self.x = x
        self.b = b
        self.pool = pool
        diff_norm = np.sqrt(np.maximum(sq_distances(b[None, :], pool)[0], 0.0))
        self.gnorm = 2.0 * diff_norm
        # s_a(x) = |x - a|^2 - |x - b|^2
        self.slack_x = pool_sq_dist - b_sq_dist
        self.box = box

    def violations(self, u, tol):
        """Indices into the combined row space (pool rows, then box rows) whose
        normalized violation exceeds tol, sorted by decreasing violation."""
        # s_a(x+u) = s_a(x) - 2 (a - b).u
        s = self.slack_x - 2.0 * (self.pool @ u - self.b @ u)
        with np.errstate(divide="ignore", invalid="ignore"):
            v = np.where(self.gnorm > 0, -s / self.gnorm, -np.inf)
        parts = [v]
        if self.box:
            z = self.x + u
            parts += [z - 1.0, -z]
        allv = np.concatenate(parts)
        idx = np.flatnonzero(allv > tol)
        return idx[np.argsort(-allv[idx], kind="stable")], allv

    def rows(self, idx):
        m = len(self.pool)
        n = len(self.x)
        normals = np.empty((len(idx), n))
        offsets = np.empty(len(idx))
        for k, i in enumerate(idx):
            if i < m:
                g = 2.0 * (self.pool[i] - self.b)
                normals[k] = g / self.gnorm[i]
                offsets[k] = self.slack_x[i] / self.gnorm[i]
            else:
                j = i - m
                normals[k] = 0.0
                if j < n:  # x_j + u_j <= 1
                    normals[k, j] = 1.0
                    offsets[k] = 1.0 - self.x[j]
                else:  # -(x_j + u_j) <= 0
                    normals[k, j - n] = -1.0
                    offsets[k] = self.x[j - n]
        return normals, offsets

    def segment_to_anchor(self, u):
        """Smallest t in [0, 1] such that x + u + t (b - x - u) lies in P_b; returns that perturbation."""
        z0 = self.x + u
        if self.box:
            z0 = np.clip(z0, 0.0, 1.0)
        # s_a(z) = |z - a|^2 - |z - b|^2 is affine along the segment and
        # equals |a - b|^2 >= 0 at z = b
        s0 = (sq_distances(z0[None, :], self.pool)[0] - float(np.sum((z0 - self.b) ** 2)))
        s1 = (self.gnorm / 2.0) ** 2
        need = s0 < 0
        t = 0.0
        if np.any(need):
            t = float(np.max(-s0[need] / (s1[need] - s0[need])))
        return z0 + min(t, 1.0) * (self.b - z0) - self.x


def _solve_anchor_l2(prob: _AnchorProblem, cutoff, solver, tol, max_sweeps):
    """Cutting-plane projection onto P_b. Returns (status, distance, u) where
    status is 'feasible', 'above' (relaxed bound passed cutoff) or 'empty'."""
    feas = _FEAS_TOL[solver]
    viol, _ = prob.violations(np.zeros(len(prob.x)), feas)
    if len(viol) == 0:
        return "feasible", 0.0, np.zeros(len(prob.x))
    active = list(viol[:_SEED_CONSTRAINTS])
    lam = None
    for _ in range(_MAX_ROUNDS):
        normals, offsets = prob.rows(active)
        if solver == "ldp":
            u = project_halfspaces_ldp(normals, offsets)
            if u is None:
                return "empty", math.inf, None
        else:
            warm = None if lam is None else np.concatenate([lam, np.zeros(len(active) - len(lam))])
            try:
                u, lam, _ = project_halfspaces_dykstra(normals, offsets, tol, max_sweeps, warm)
            except SolverError as exc:
                upper = prob.segment_to_anchor(exc.witness)
                raise SolverError(str(exc), float(np.linalg.norm(upper)), upper) from None
        dist = float(np.linalg.norm(u))
        if dist > cutoff:
            return "above", dist, u
        viol, allv = prob.violations(u, feas * max(1.0, dist))
        seen = set(active)
        fresh = [i for i in viol if i not in seen]
        if not fresh:
            if len(viol) and solver == "dykstra" and allv[viol[0]] > 1e-4 * max(1.0, dist):
                raise SolverError("Dykstra iterate remains infeasible",
                                  float(np.linalg.norm(prob.segment_to_anchor(u))))
            return "feasible", dist, u
        active.extend(fresh[:_CUTS_PER_ROUND])
    raise SolverError("cutting-plane loop did not terminate",
                      float(np.linalg.norm(prob.segment_to_anchor(u))))


def _solve_anchor_linf(prob: _AnchorProblem, cutoff, tol=1e-9):
    """Cutting-plane LP: minimise t subject to |u_j| <= t and the working-set
    bisector rows. Box constraints become variable bounds."""
    n = len(prob.x)
    m = len(prob.pool)
    viol, _ = prob.violations(np.zeros(n), tol)
    viol = viol[viol < m]
    if len(viol) == 0:
        return "feasible", 0.0, np.zeros(n)
    active = list(viol[:_SEED_CONSTRAINTS])
    eye = sparse.identity(n, format="csr")
    ones = sparse.csr_matrix(np.ones((n, 1)))
    abs_rows = sparse.vstack([sparse.hstack([eye, -ones]), sparse.hstack([-eye, -ones])])
    cost = np.zeros(n + 1)
    cost[-1] = 1.0
    if prob.box:
        bounds = [(-xj, 1.0 - xj) for xj in prob.x] + [(0, None)]
    else:
        bounds = [(None, None)] * n + [(0, None)]
    for _ in range(_MAX_ROUNDS):
        normals, offsets = prob.rows(active)
        A = sparse.vstack([abs_rows, sparse.hstack([sparse.csr_matrix(normals),
                                                    sparse.csr_matrix((len(active), 1))])])
        rhs = np.concatenate([np.zeros(2 * n), offsets])
        res = optimize.linprog(cost, A_ub=A.tocsr(), b_ub=rhs, bounds=bounds, method="highs")
        if res.status == 2:
            return "empty", math.inf, None
        if res.status != 0:
            raise SolverError(f"linear program failed: {res.message}")
        u = res.x[:n]
        dist = float(np.max(np.abs(u)))
        if dist > cutoff:
            return "above", dist, u
        v, _ = prob.violations(u, 1e-7 * max(1.0, dist))
        v = v[v < m]
        seen = set(active)
        fresh = [i for i in v if i not in seen]
        if not fresh:
            return "feasible", dist, u
        active.extend(fresh[:_CUTS_PER_ROUND])
    raise SolverError("cutting-plane loop did not terminate")


def segment_flip_bounds(index: NNIndex, X, y, nearest_other=None):
    """Upper bounds on the minimal flip, one batch GEMM per block.

    Walks from each query x towards its nearest wrong-class point b and
    returns the first point of the segment lying in b's cell (every bisector
    constraint is affine along the segment). Returns (l2, linf) norms of that
    perturbation; the point stays in [0, 1]^N whenever x and b do.
    """
    from .index import _blocks, margins

    q = _as_queries(index, X)
    y = np.broadcast_to(np.asarray(y, dtype=np.int64), (len(q),))
    if nearest_other is None:
        nearest_other = margins(index, q, y).nearest_other_id
    up2 = np.empty(len(q))
    upinf = np.empty(len(q))
    for c in (0, 1):
        sel = np.flatnonzero(y == c)
        if len(sel) == 0:
            continue
        rows = index.class_rows[c]
        A = index.vectors[rows]
        a_sq = index.sq_norms[rows]
        for s in _blocks(len(sel), len(rows)):
            ids = sel[s]
            xq = q[ids]
            bq = index.vectors[nearest_other[ids]]
            dxb = np.einsum("ij,ij->i", xq - bq, xq - bq)
            s_x = sq_distances(xq, A, a_sq) - dxb[:, None]
            s_b = sq_distances(bq, A, a_sq)
            need = s_x < 0
            with np.errstate(divide="ignore", invalid="ignore"):
                t = np.where(need, -s_x / (s_b - s_x), 0.0)
            t = np.clip(np.nan_to_num(t.max(axis=1), nan=1.0), 0.0, 1.0)
            step = bq - xq
            up2[ids] = t * np.sqrt(dxb)
            upinf[ids] = t * np.abs(step).max(axis=1)
    return up2, upinf


def _pnorm(u, p):
    return float(np.max(np.abs(u))) if p == math.inf else float(np.linalg.norm(u))


def _flipping_witness(index, x, y, u, b, box):
    """Push x+u towards anchor b until the 1NN label actually changes (breaks
    boundary ties and solver round-off)."""
    from .index import predict

    z = x + u
    if box:
        z = np.clip(z, 0.0, 1.0)
    tau = 1e-9
    while tau <= 1.0:
        cand = z + tau * (b - z)
        if predict(index, cand) != y:
            return cand - x
        tau *= 4.0
    return None


def _search(index: NNIndex, x, y: int, p: float, limit=math.inf, box=False, solver="dykstra",
            prune_slack=1e-9, tol=DYKSTRA_TOL, max_sweeps=DYKSTRA_MAX_SWEEPS) -> MinPerturbation:
    if solver not in _FEAS_TOL:
        raise ConfigurationError(f"unknown solver {solver!r}")
    x = _as_queries(index, x)[0]
    y = int(y)
    n = len(x)
    rows_a = index.class_rows[y]
    rows_b = index.class_rows[1 - y]
    A = index.vectors[rows_a]
    B = index.vectors[rows_b]
    dA2 = sq_distances(x[None, :], A, index.sq_norms[rows_a])[0]
    dB2 = sq_distances(x[None, :], B, index.sq_norms[rows_b])[0]
    all_d2 = sq_distances(x[None, :], index.vectors, index.sq_norms)[0]
    nearest = int(np.argmin(all_d2))
    if index.labels[nearest] != y:
        return MinPerturbation(0.0, np.zeros(n), nearest, p)
    dA = np.sqrt(dA2)
    dB = np.sqrt(dB2)
    d_same = float(dA.min())

    # per-anchor lower bounds from the bisectors with the closest correct-class points
    k = min(_LB_NEIGHBOURS, len(A))
    near = np.argsort(dA2, kind="stable")[:k]
    if p == math.inf:
        gn = np.stack([2.0 * np.abs(B - A[i]).sum(axis=1) for i in near])
    else:
        gn = 2.0 * np.sqrt(sq_distances(A[near], B, index.sq_norms[rows_b]))
    with np.errstate(divide="ignore", invalid="ignore"):
        hs = (dB2[None, :] - dA2[near][:, None]) / gn
    # a zero-length bisector means a duplicate of b in the correct class; the
    # lower-index copy wins every tie
    dup = gn == 0
    if np.any(dup):
        ia, ib = np.nonzero(dup)
        lower = rows_a[near[ia]] < rows_b[ib]
        hs[ia[lower], ib[lower]] = np.inf
        hs[ia[~lower], ib[~lower]] = 0.0
    lb = np.maximum(np.nan_to_num(hs, nan=0.0).max(axis=0), 0.0)
    order = np.argsort(lb, kind="stable")
    # l2 reach of a perturbation inside the cutoff, for the triangle-inequality prune
    reach = math.sqrt(n) if p == math.inf else 1.0

    best = math.inf
    best_u = None
    best_anchor = -1
    lower = math.inf
    solved = 0
    err = None
    failed_lb = math.inf
    for j in order:
        cutoff = min(best, limit)
        if lb[j] > cutoff or lb[j] >= best:
            lower = min(lower, float(lb[j]))
            break
        if math.isfinite(cutoff) and dB[j] > d_same + 2.0 * reach * cutoff + prune_slack:
            lower = min(lower, float(lb[j]))
            continue
        # constraints from correct-class points that cannot bind inside the cutoff are dropped
        if math.isfinite(cutoff):
            keep = dA <= d_same + 2.0 * reach * cutoff + prune_slack
        else:
            keep = slice(None)
        prob = _AnchorProblem(x, B[j], A[keep], dA2[keep], dB2[j], box)
        solved += 1
        try:
            if p == math.inf:
                status, dist, u = _solve_anchor_linf(prob, cutoff)
            else:
                status, dist, u = _solve_anchor_l2(prob, cutoff, solver, tol, max_sweeps)
        except SolverError as exc:
            err = exc
            failed_lb = min(failed_lb, float(lb[j]))
            continue
        if status == "feasible" and dist < best:
            best, best_u, best_anchor = dist, u, int(rows_b[j])
            if best <= limit and math.isfinite(limit):
                break
        elif status == "above":
            lower = min(lower, dist)
    # a failed anchor matters unless the answer is already settled without it
    settled = best <= failed_lb or (math.isfinite(limit) and best <= limit)
    if err is not None and not settled:
        ub = min(best, err.upper_bound)
        raise SolverError(f"minimal perturbation unresolved: {err}", ub, best_u)
    if best_u is None:
        # nothing at or below the cutoff: either no reachable cell at all, or
        # only a lower bound above the limit is known
        if math.isinf(lower):
            return MinPerturbation(math.inf, None, -1, p, anchors_solved=solved)
        return MinPerturbation(lower, None, -1, p, exact=False, anchors_solved=solved)
    witness = _flipping_witness(index, x, y, best_u, index.vectors[best_anchor], box)
    return MinPerturbation(best, witness, best_anchor, p, exact=True, anchors_solved=solved)


def min_adversarial_l2(index: NNIndex, x, true_label: int, prune_slack: float = 1e-9,
                       box: bool = False, solver: str = "dykstra", tol: float = DYKSTRA_TOL,
                       max_sweeps: int = DYKSTRA_MAX_SWEEPS) -> MinPerturbation:
    """Smallest l2 perturbation changing the 1NN label of x (0 if already wrong)."""
    return _search(index, x, true_label, 2.0, box=box, solver=solver, prune_slack=prune_slack,
                   tol=tol, max_sweeps=max_sweeps)


def min_adversarial_linf(index: NNIndex, x, true_label: int, box: bool = False,
                         prune_slack: float = 1e-9) -> MinPerturbation:
    """Smallest l-infinity perturbation changing the 1NN label of x.

    With ``box`` the perturbed point must stay in [0, 1]^N; if no wrong-class
    cell meets the box, ``distance`` is ``inf``.
    """
    return _search(index, x, true_label, math.inf, box=box, prune_slack=prune_slack)


def flips_within(index: NNIndex, x, true_label: int, eps: float, p=2, box=False,
                 solver="dykstra") -> MinPerturbation:
    """Decision form: searches only for flips of norm <= eps.

    The result is exact when a flip is found (``distance <= eps``); otherwise
    ``distance`` is a lower bound above eps.
    """
    p = math.inf if p in (math.inf, "inf") else float(p)
    return _search(index, x, true_label, p, limit=eps, box=box, solver=solver)
