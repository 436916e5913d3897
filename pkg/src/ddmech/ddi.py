"""Material database identification from displacement snapshots.

Given per-snapshot nodal displacements and applied forces on a shared
discrete model, the identifier simultaneously computes per-snapshot
admissible stress fields and a database of material states (strain-stress
centroids) by a fixed-point loop: solve the stationarity system for the
material stresses and snapshot multipliers, update mechanical stresses,
re-map points to their nearest material state, recenter strain centroids.

The stationarity system is solved by block elimination: the shared
pseudo-stiffness is factorized once and the reduced SPD system in the
material stresses is solved matrix-free with preconditioned CG, warm
started across outer iterations (which also makes the objective decrease
monotone even with a finite CG tolerance).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla
from scipy.spatial import cKDTree

from .errors import NumericsError
from .fe_core import BoundaryConditions, DiscreteModel, assemble_operator
from .phase_space import MaterialDatabase, Metric, n_workers

STATE_RATIO_GUIDELINE = 200.0


@dataclass
class Snapshot:
    """One loading instant: displacements, applied forces, constraint flags.

    `f` must vanish on `dirichlet_dofs` (reactions there are unknown and
    are excluded through homogeneous multiplier boundary conditions).
    """

    u: np.ndarray
    f: np.ndarray
    dirichlet_dofs: np.ndarray
    time: float = 0.0
    resultants: dict | None = None

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float).reshape(-1)
        self.f = np.asarray(self.f, dtype=float).reshape(-1)
        self.dirichlet_dofs = np.unique(np.asarray(self.dirichlet_dofs, dtype=np.int64))

    def validate(self, ndof: int) -> None:
        if self.u.shape != (ndof,) or self.f.shape != (ndof,):
            raise ValueError(f"snapshot vectors must have length {ndof}")
        if not np.all(np.isfinite(self.u)):
            raise ValueError("snapshot displacements contain non-finite values")
        if self.dirichlet_dofs.size and np.any(self.f[self.dirichlet_dofs] != 0.0):
            raise ValueError("applied forces must be zero on prescribed-displacement DOFs")


@dataclass
class DDIOptions:
    seed: int = 42
    max_outer: int = 100
    kmeans_max_iter: int = 100
    kmeans_subsample: int = 200_000
    cg_rtol: float = 1e-10
    cg_maxiter: int = 800


@dataclass
class DDIProblem:
    """Snapshots + discrete model + metric + requested database size."""

    snapshots: list[Snapshot]
    model: DiscreteModel
    metric: Metric
    n_star: int
    options: DDIOptions = field(default_factory=DDIOptions)

    def __post_init__(self):
        if self.n_star < 1:
            raise ValueError("requested database size must be at least 1")
        if self.options.max_outer < 1:
            raise ValueError("max_outer must be at least 1")
        if not self.snapshots:
            raise ValueError("at least one snapshot is required")
        ndof = self.model.n_dof
        pattern = self.snapshots[0].dirichlet_dofs
        for s in self.snapshots:
            s.validate(ndof)
            if not np.array_equal(s.dirichlet_dofs, pattern):
                raise ValueError("all snapshots must share one Dirichlet DOF pattern")
        total = self.model.quad.n_points * len(self.snapshots)
        if total < self.n_star:
            raise ValueError(
                f"{total} mechanical states cannot support {self.n_star} material states"
            )
        if total < STATE_RATIO_GUIDELINE * self.n_star:
            warnings.warn(
                f"mechanical-to-material state ratio {total / self.n_star:.0f} is below "
                f"the ~{STATE_RATIO_GUIDELINE:.0f}:1 guideline; identified states may be noisy",
                stacklevel=2,
            )


@dataclass
class DDIResult:
    """Identified database, per-snapshot stresses and diagnostics."""

    database: MaterialDatabase
    eps_star: np.ndarray
    sig_star: np.ndarray
    stresses: np.ndarray  # (A, M, 3) mechanical stresses per snapshot
    eta: np.ndarray  # (A, ndof) multiplier fields
    mapping: np.ndarray  # (A, M) database index per point
    converged: bool
    iterations: int
    objective_history: list[float]
    cluster_weights: np.ndarray
    equilibrium_residuals: np.ndarray  # (iters, A) relative residuals
    empty_cluster_events: int = 0


# -- k-means initialization ----------------------------------------------------


def kmeans_init(
    strains: np.ndarray,
    weights: np.ndarray,
    n_star: int,
    seed: int = 42,
    metric: Metric | None = None,
    max_iter: int = 100,
    subsample: int = 200_000,
) -> tuple[np.ndarray, np.ndarray]:
    """Weighted Lloyd clustering of strain points under the metric distance.

    Seeding is k-means++ (on a uniform subsample above `subsample` points);
    assignment uses a k-d tree in metric-embedded coordinates.  Empty
    clusters re-seed to the point farthest from its centroid.  Deterministic
    for a fixed seed.

    Returns (centroids (n_star, 3) in strain space, assignment (n,)).
    """
    strains = np.asarray(strains, dtype=float).reshape(-1, 3)
    weights = np.asarray(weights, dtype=float).reshape(-1)
    n = strains.shape[0]
    if weights.shape[0] != n:
        raise ValueError("weights length must match strain count")
    distinct = np.unique(strains, axis=0).shape[0]
    if n_star > distinct:
        raise ValueError(f"{n_star} clusters exceed the {distinct} distinct strain points")
    metric = metric or Metric(np.eye(3))
    pts = metric.embed_strain(strains)
    rng = np.random.default_rng(seed)

    if n > subsample:
        pick = rng.choice(n, size=subsample, replace=False)
        seed_pts, seed_w = pts[pick], weights[pick]
    else:
        seed_pts, seed_w = pts, weights
    centers = _kmeanspp(seed_pts, seed_w, n_star, rng)

    assign = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        d, assign_new = cKDTree(centers).query(pts, workers=n_workers())
        centers_new, counts = _weighted_means(pts, weights, assign_new, n_star)
        empties = np.flatnonzero(counts == 0.0)
        if empties.size:
            far = np.argsort(d)[::-1]
            centers_new[empties] = pts[far[: empties.size]]
        changed = int(np.count_nonzero(assign_new != assign))
        centers, assign = centers_new, assign_new
        if changed == 0 and not empties.size:
            break
    d, assign = cKDTree(centers).query(pts, workers=n_workers())
    # guarantee non-empty clusters in the returned mapping
    counts = np.bincount(assign, minlength=n_star)
    guard = 0
    while np.any(counts == 0) and guard < n_star:
        i = int(np.flatnonzero(counts == 0)[0])
        far = int(np.argmax(np.where(counts[assign] > 1, d, -1.0)))
        counts[assign[far]] -= 1
        assign[far] = i
        counts[i] += 1
        centers[i] = pts[far]
        d[far] = 0.0
        guard += 1
    centroids, _ = _weighted_means(pts, weights, assign, n_star)
    return metric.unembed_strain(centroids), assign


def _kmeanspp(pts: np.ndarray, w: np.ndarray, k: int, rng) -> np.ndarray:
    """Classic weighted k-means++ seeding (one candidate per step)."""
    n = pts.shape[0]
    centers = np.empty((k, pts.shape[1]))
    p = w / w.sum()
    centers[0] = pts[rng.choice(n, p=p)]
    d2 = np.sum((pts - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        q = w * d2
        tot = q.sum()
        if tot <= 0:  # all remaining points coincide with chosen centers
            centers[i:] = pts[rng.choice(n, size=k - i)]
            break
        centers[i] = pts[rng.choice(n, p=q / tot)]
        d2 = np.minimum(d2, np.sum((pts - centers[i]) ** 2, axis=1))
    return centers


def _weighted_means(pts, w, assign, k):
    sums = np.zeros((k, pts.shape[1]))
    for c in range(pts.shape[1]):
        sums[:, c] = np.bincount(assign, weights=w * pts[:, c], minlength=k)
    counts = np.bincount(assign, weights=w, minlength=k)
    out = np.divide(sums, counts[:, None], out=np.zeros_like(sums), where=counts[:, None] > 0)
    return out, counts


# -- stationarity system -------------------------------------------------------


class _StationarityContext:
    """Shared immutable pieces of the stationarity solves of one DDI run."""

    def __init__(self, problem: DDIProblem, op):
        quad = problem.model.quad
        self.op = op
        self.free = op.free
        self.w = quad.w
        self.B_free = quad.strain_op[:, self.free].tocsr()
        self.Bt_free = self.B_free.T.tocsr()
        self.C = problem.metric.C
        self.M = quad.n_points
        self.A = len(problem.snapshots)
        f_free = np.column_stack([s.f[self.free] for s in problem.snapshots])
        self.f_free = f_free
        self.uf = op.solve_free(f_free)  # K^-1 f, all snapshots at once
        if self.uf.ndim == 1:
            self.uf = self.uf[:, None]

    def strains_of(self, z_free: np.ndarray) -> np.ndarray:
        """Per-point Mandel strains of free-DOF vectors; (M, 3, A)."""
        cols = self.B_free @ z_free
        return cols.reshape(self.M, 3, -1)

    def gather_rhs(self, fields: np.ndarray) -> np.ndarray:
        """Free-DOF internal-force vectors of per-snapshot stress fields (A, M, 3)."""
        arr = (fields * self.w[None, :, None]).reshape(self.A, -1).T
        return self.Bt_free @ np.ascontiguousarray(arr)

    def scatter_clusters(self, fields: np.ndarray, mapping: np.ndarray, n_star: int) -> np.ndarray:
        """Per-cluster aggregation sum_{a,e in cluster} w_e * field_e; (n_star, 3)."""
        out = np.zeros((n_star, 3))
        for a in range(self.A):
            wf = self.w[:, None] * fields[a]
            for c in range(3):
                out[:, c] += np.bincount(mapping[a], weights=wf[:, c], minlength=n_star)
        return out


def solve_stationarity(
    mapping: np.ndarray,
    problem: DDIProblem,
    op,
    context: _StationarityContext | None = None,
    x0: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, dict]:
    """Material stresses and snapshot multipliers for a fixed state mapping.

    Eliminates the multipliers through the factorized pseudo-stiffness and
    solves the reduced SPD system in the material stresses with
    preconditioned CG (block-Jacobi preconditioner from the cluster
    weights).  The multipliers are then recovered by direct back-solves,
    so each snapshot's equilibrium holds to factorization accuracy
    regardless of the CG tolerance.

    Returns (sig_star (n_star, 3), eta (A, ndof), info dict).
    """
    ctx = context or _StationarityContext(problem, op)
    n_star = problem.n_star
    mapping = np.asarray(mapping, dtype=np.int64).reshape(ctx.A, ctx.M)
    Wc = np.zeros(n_star)
    for a in range(ctx.A):
        Wc += np.bincount(mapping[a], weights=ctx.w, minlength=n_star)
    if np.any(Wc <= 0.0):
        bad = int(np.flatnonzero(Wc <= 0.0)[0])
        raise NumericsError(f"material state {bad} has zero assigned weight; cannot solve")

    def S_matvec(x_flat: np.ndarray) -> np.ndarray:
        x = x_flat.reshape(n_star, 3)
        fields = x[mapping]  # (A, M, 3)
        rhs = ctx.gather_rhs(fields)
        z = ctx.op.solve_free(rhs)
        if z.ndim == 1:
            z = z[:, None]
        eps = np.moveaxis(ctx.strains_of(z), 2, 0)  # (A, M, 3)
        return ctx.scatter_clusters(eps, mapping, n_star).ravel()

    uf_eps = np.moveaxis(ctx.strains_of(ctx.uf), 2, 0)
    b = ctx.scatter_clusters(uf_eps, mapping, n_star).ravel()

    # spectral bound: S <= blockdiag(W_i C^-1), so apply C / W_i as preconditioner
    C = problem.metric.C

    def precond(r_flat: np.ndarray) -> np.ndarray:
        r = r_flat.reshape(n_star, 3)
        return ((r @ C) / Wc[:, None]).ravel()

    n = 3 * n_star
    S = spla.LinearOperator((n, n), matvec=S_matvec)
    P = spla.LinearOperator((n, n), matvec=precond)
    x0_flat = None if x0 is None else np.asarray(x0, dtype=float).ravel()
    bnorm = np.linalg.norm(b)
    opts = problem.options
    iters = 0

    def count(_):
        nonlocal iters
        iters += 1

    x, cg_info = spla.cg(
        S, b, x0=x0_flat, rtol=opts.cg_rtol, atol=0.0, maxiter=opts.cg_maxiter, M=P, callback=count
    )
    if cg_info < 0:
        raise NumericsError("reduced stationarity solve broke down")
    sig_star = x.reshape(n_star, 3)
    resid = np.linalg.norm(b - S_matvec(x)) / max(bnorm, 1e-300)

    # recover multipliers: K eta = f - G sig_star on free DOFs (exact back-solve)
    rhs = ctx.f_free - ctx.gather_rhs(sig_star[mapping])
    eta_free = ctx.op.solve_free(rhs)
    if eta_free.ndim == 1:
        eta_free = eta_free[:, None]
    eta = np.zeros((ctx.A, problem.model.n_dof))
    eta[:, ctx.free] = eta_free.T
    info = {"cg_iterations": iters, "cg_converged": cg_info == 0, "cluster_residual": resid}
    return sig_star, eta, info


def update_stresses(
    sig_star: np.ndarray, eta: np.ndarray, mapping: np.ndarray, problem: DDIProblem
) -> np.ndarray:
    """Mechanical stresses s_e = s*_map(e) + C B_e eta per snapshot; (A, M, 3)."""
    quad = problem.model.quad
    A = len(problem.snapshots)
    M = quad.n_points
    mapping = np.asarray(mapping, dtype=np.int64).reshape(A, M)
    out = np.empty((A, M, 3))
    for a in range(A):
        out[a] = sig_star[mapping[a]] + quad.strains(eta[a]) @ problem.metric.C
    return out


def update_mapping(states: np.ndarray, db_states: np.ndarray, metric: Metric) -> tuple[np.ndarray, np.ndarray]:
    """Nearest material state per mechanical state in the full phase metric.

    Returns (mapping, squared distances), flat over all snapshots.
    """
    db = MaterialDatabase(db_states, metric)
    return db.query(states)


def update_centroids(
    mapping: np.ndarray, strains: np.ndarray, weights: np.ndarray, n_star: int
) -> tuple[np.ndarray, np.ndarray]:
    """Weighted mean strain per cluster; empty clusters keep NaN and are flagged.

    Returns (centroids (n_star, 3), empty cluster indices).
    """
    mapping = np.asarray(mapping, dtype=np.int64).reshape(-1)
    strains = np.asarray(strains, dtype=float).reshape(-1, 3)
    weights = np.asarray(weights, dtype=float).reshape(-1)
    means, counts = _weighted_means(strains, weights, mapping, n_star)
    empties = np.flatnonzero(counts == 0.0)
    means[empties] = np.nan
    return means, empties


def ddi_solve(problem: DDIProblem, init_mapping: np.ndarray | None = None) -> DDIResult:
    """Fixed-point identification loop.

    Iterates stationarity solve, stress update, mapping update and centroid
    update until the mapping stops changing or `max_outer` is reached.  The
    objective (weighted squared phase distance summed over snapshots) is
    recorded each outer iteration and is non-increasing.
    """
    opts = problem.options
    quad = problem.model.quad
    metric = problem.metric
    A, M = len(problem.snapshots), quad.n_points
    n_star = problem.n_star

    pattern = problem.snapshots[0].dirichlet_dofs
    op = assemble_operator(
        quad, metric, BoundaryConditions(dirichlet={int(d): 0.0 for d in pattern})
    )
    ctx = _StationarityContext(problem, op)

    eps_all = np.stack([quad.strains(s.u) for s in problem.snapshots])  # (A, M, 3)
    eps_flat = eps_all.reshape(-1, 3)
    w_flat = np.tile(quad.w, A)

    if init_mapping is not None:
        mapping = np.asarray(init_mapping, dtype=np.int64).reshape(A, M)
        eps_star, _ = update_centroids(mapping, eps_flat, w_flat, n_star)
        if np.any(np.isnan(eps_star)):
            raise ValueError("init_mapping leaves empty material states")
    else:
        eps_star, assign = kmeans_init(
            eps_flat,
            w_flat,
            n_star,
            seed=opts.seed,
            metric=metric,
            max_iter=opts.kmeans_max_iter,
            subsample=opts.kmeans_subsample,
        )
        mapping = assign.reshape(A, M)

    sig_star = None
    objective_history: list[float] = []
    equil_hist: list[np.ndarray] = []
    converged = False
    reseeds_total = 0
    outer = 0

    for outer in range(1, opts.max_outer + 1):
        sig_star, eta, info = solve_stationarity(mapping, problem, op, context=ctx, x0=sig_star)
        stresses = update_stresses(sig_star, eta, mapping, problem)
        equil_hist.append(_equilibrium_residuals(problem, ctx, stresses))

        z_flat = np.hstack([eps_flat, stresses.reshape(-1, 3)])
        db_states = np.hstack([eps_star, sig_star])
        flat_map, d2pp = update_mapping(z_flat, db_states, metric)

        new_centroids, empties = update_centroids(flat_map, eps_flat, w_flat, n_star)
        keep = ~np.isnan(new_centroids[:, 0])
        eps_star = np.where(keep[:, None], new_centroids, eps_star)

        reseeds = _reseed_empty(empties, flat_map, d2pp, eps_flat, stresses.reshape(-1, 3),
                                eps_star, sig_star, n_star)
        reseeds_total += reseeds

        objective_history.append(
            _objective(z_flat, np.hstack([eps_star, sig_star]), flat_map, w_flat, metric)
        )
        mapping_new = flat_map.reshape(A, M)
        if reseeds == 0 and np.array_equal(mapping_new, mapping):
            mapping = mapping_new
            converged = True
            break
        mapping = mapping_new

    Wc = np.zeros(n_star)
    for a in range(A):
        Wc += np.bincount(mapping[a], weights=quad.w, minlength=n_star)
    return DDIResult(
        database=MaterialDatabase(np.hstack([eps_star, sig_star]), metric),
        eps_star=eps_star,
        sig_star=sig_star,
        stresses=stresses,
        eta=eta,
        mapping=mapping,
        converged=converged,
        iterations=outer,
        objective_history=objective_history,
        cluster_weights=Wc,
        equilibrium_residuals=np.array(equil_hist),
        empty_cluster_events=reseeds_total,
    )


def _equilibrium_residuals(problem: DDIProblem, ctx: _StationarityContext, stresses) -> np.ndarray:
    """Relative free-DOF equilibrium residual per snapshot."""
    internal = ctx.gather_rhs(stresses)  # (nfree, A)
    out = np.empty(ctx.A)
    for a in range(ctx.A):
        scale = max(np.linalg.norm(ctx.f_free[:, a]), np.linalg.norm(internal[:, a]), 1e-300)
        out[a] = np.linalg.norm(internal[:, a] - ctx.f_free[:, a]) / scale
    return out


def _reseed_empty(empties, flat_map, d2pp, eps_flat, sig_flat, eps_star, sig_star, n_star) -> int:
    """Re-seed empty clusters to the worst-matched mechanical states (in place).

    Moving a point to an empty cluster sets that cluster's state to the
    point's own state (distance zero), so the objective cannot increase.
    """
    if empties.size == 0:
        return 0
    count = 0
    pending = [int(i) for i in empties]
    npts = np.bincount(flat_map, minlength=n_star)
    order = np.argsort(d2pp)[::-1]  # worst-matched points first
    cursor = 0
    while pending:
        i = pending.pop(0)
        if npts[i] > 0:
            continue
        donor = -1
        while cursor < order.size:
            e = int(order[cursor])
            cursor += 1
            if npts[flat_map[e]] > 1:  # donor cluster stays non-empty
                donor = e
                break
        if donor < 0:
            raise NumericsError(f"cannot re-seed empty material state {i}")
        old = int(flat_map[donor])
        flat_map[donor] = i
        npts[old] -= 1
        npts[i] += 1
        eps_star[i] = eps_flat[donor]
        sig_star[i] = sig_flat[donor]
        d2pp[donor] = 0.0
        count += 1
    return count


def _objective(z_flat, db_states, flat_map, w_flat, metric: Metric) -> float:
    diff = metric.embed_states(z_flat) - metric.embed_states(db_states[flat_map])
    return float(np.sum(w_flat * np.einsum("ij,ij->i", diff, diff)))
