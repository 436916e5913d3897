"""Identification pipeline: clustering, stationarity system, fixed point."""

import warnings

import numpy as np
import pytest

from ddmech.datagen import (
    LinearElasticLaw,
    LoadHistory,
    gen_mesh,
    hooke_stress,
    run_virtual_experiment,
)
from ddmech.ddi import (
    DDIOptions,
    DDIProblem,
    Snapshot,
    ddi_solve,
    kmeans_init,
    solve_stationarity,
    update_centroids,
    update_mapping,
    update_stresses,
)
from ddmech.fe_core import (
    BoundaryConditions,
    Mesh,
    assemble_operator,
    build_model,
    fem_reference_solve,
    internal_forces,
)
from ddmech.phase_space import Metric

LAW = LinearElasticLaw(217.5e9, 0.3)
METRIC = Metric.isotropic_plane_strain(100e9, 0.35)


def rect_mesh(nx, ny, lx=1.0, ly=1.0) -> Mesh:
    xs, ys = np.linspace(0, lx, nx + 1), np.linspace(0, ly, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    nodes = np.column_stack([X.ravel(), Y.ravel()])
    def nid(i, j):
        return i * (ny + 1) + j
    conn = [[nid(i, j), nid(i + 1, j), nid(i + 1, j + 1), nid(i, j + 1)]
            for i in range(nx) for j in range(ny)]
    return Mesh(nodes=nodes, blocks=[("Q4", conn)])


def uniform_biaxial_problem(nx=3, ny=3, sx=1e9, sy=-5e8, n_star=1, **opt):
    """Traction-driven square with a uniform exact stress state."""
    mesh = rect_mesh(nx, ny)
    dirichlet = {}
    f = np.zeros(mesh.n_dof)
    for n in range(mesh.n_nodes):
        x, y = mesh.nodes[n]
        if x == 0.0:
            dirichlet[2 * n] = 0.0
        if y == 0.0:
            dirichlet[2 * n + 1] = 0.0
    # consistent loads of uniform tractions on right (x) and top (y) edges
    for n in range(mesh.n_nodes):
        x, y = mesh.nodes[n]
        if x == 1.0:
            frac = 1.0 if 0.0 < y < 1.0 else 0.5
            f[2 * n] += sx * frac / ny
        if y == 1.0:
            frac = 1.0 if 0.0 < x < 1.0 else 0.5
            f[2 * n + 1] += sy * frac / nx
    bcs = BoundaryConditions(dirichlet=dirichlet, forces=f)
    model = build_model(mesh, bcs)
    fem = fem_reference_solve(model, LAW)
    dir_dofs = np.fromiter(dirichlet.keys(), dtype=np.int64)
    f_snap = f.copy()
    f_snap[dir_dofs] = 0.0
    snap = Snapshot(u=fem.u, f=f_snap, dirichlet_dofs=dir_dofs)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        problem = DDIProblem(snapshots=[snap], model=model, metric=METRIC, n_star=n_star,
                             options=DDIOptions(**opt))
    return model, fem, problem


@pytest.fixture(scope="module")
def sample_experiment():
    mesh = gen_mesh("perforated_sample", {}, 0.06)
    model, snaps = run_virtual_experiment(mesh, LAW, LoadHistory.biaxial_default(), 5)
    return model, snaps


def make_problem(model, snaps, n_star, **opt):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return DDIProblem(snapshots=list(snaps), model=model, metric=METRIC,
                          n_star=n_star, options=DDIOptions(**opt))


class TestKmeansInit:
    def test_single_cluster_weighted_mean(self):
        rng = np.random.default_rng(0)
        strains = rng.normal(size=(300, 3)) * 1e-3
        w = rng.uniform(0.1, 2.0, size=300)
        centroids, assign = kmeans_init(strains, w, 1, seed=1, metric=METRIC)
        np.testing.assert_allclose(
            centroids[0], np.average(strains, axis=0, weights=w), rtol=1e-12
        )
        assert np.all(assign == 0)

    def test_all_points_distinct_clusters(self):
        rng = np.random.default_rng(1)
        strains = rng.normal(size=(12, 3)) * 1e-3
        centroids, assign = kmeans_init(strains, np.ones(12), 12, seed=2, metric=METRIC)
        # zero inertia: every point is its own centroid
        np.testing.assert_allclose(np.sort(centroids, axis=0), np.sort(strains, axis=0), rtol=1e-12)
        assert len(np.unique(assign)) == 12

    def test_two_blobs_separate(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(400, 3)) * 1e-4 + np.array([5e-3, 0, 0])
        b = rng.normal(size=(400, 3)) * 1e-4 - np.array([5e-3, 0, 0])
        strains = np.vstack([a, b])
        centroids, assign = kmeans_init(strains, np.ones(800), 2, seed=4, metric=METRIC)
        assert len(np.unique(assign[:400])) == 1
        assert len(np.unique(assign[400:])) == 1
        assert assign[0] != assign[400]
        for blob in (a, b):
            err = np.abs(centroids - blob.mean(axis=0)).min(axis=0)
            assert np.all(err < 3e-4 / np.sqrt(400) * 3 + 3e-5)

    def test_too_many_clusters_rejected(self):
        strains = np.tile([[1e-3, 0, 0]], (5, 1))
        with pytest.raises(ValueError):
            kmeans_init(strains, np.ones(5), 2, seed=0, metric=METRIC)

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        strains = rng.normal(size=(500, 3)) * 1e-3
        c1, a1 = kmeans_init(strains, np.ones(500), 16, seed=7, metric=METRIC)
        c2, a2 = kmeans_init(strains, np.ones(500), 16, seed=7, metric=METRIC)
        np.testing.assert_array_equal(c1, c2)
        np.testing.assert_array_equal(a1, a2)


class TestSolveStationarity:
    def test_uniform_field_any_mapping(self):
        model, fem, problem = uniform_biaxial_problem(n_star=2)
        pattern = problem.snapshots[0].dirichlet_dofs
        op = assemble_operator(model.quad, METRIC,
                               BoundaryConditions(dirichlet={int(d): 0.0 for d in pattern}))
        M = model.quad.n_points
        mapping = (np.arange(M) % 2).reshape(1, M)  # arbitrary checkerboard
        sig_star, eta, info = solve_stationarity(mapping, problem, op)
        scale = np.abs(fem.u).max()
        assert np.abs(eta).max() < 1e-9 * scale
        for i in range(2):
            np.testing.assert_allclose(
                sig_star[i], fem.sig[0], rtol=1e-8, atol=1e-9 * np.abs(fem.sig).max()
            )
        assert info["cluster_residual"] < 1e-9

    def test_zero_snapshots(self):
        model, fem, problem = uniform_biaxial_problem(n_star=1)
        zero = Snapshot(u=np.zeros(model.n_dof), f=np.zeros(model.n_dof),
                        dirichlet_dofs=problem.snapshots[0].dirichlet_dofs)
        problem.snapshots[0] = zero
        pattern = zero.dirichlet_dofs
        op = assemble_operator(model.quad, METRIC,
                               BoundaryConditions(dirichlet={int(d): 0.0 for d in pattern}))
        mapping = np.zeros((1, model.quad.n_points), dtype=np.int64)
        sig_star, eta, _ = solve_stationarity(mapping, problem, op)
        np.testing.assert_allclose(sig_star, 0.0, atol=1e-30)
        np.testing.assert_allclose(eta, 0.0, atol=1e-30)

    def test_duplicated_snapshots_match_single(self, sample_experiment):
        model, snaps = sample_experiment
        one = make_problem(model, snaps[:1], 8)
        two = make_problem(model, snaps[:1] * 2, 8)
        pattern = snaps[0].dirichlet_dofs
        op = assemble_operator(model.quad, METRIC,
                               BoundaryConditions(dirichlet={int(d): 0.0 for d in pattern}))
        eps = model.quad.strains(snaps[0].u)
        _, mapping = kmeans_init(eps, model.quad.w, 8, seed=0, metric=METRIC)
        s1, e1, _ = solve_stationarity(mapping.reshape(1, -1), one, op)
        s2, e2, _ = solve_stationarity(np.tile(mapping, (2, 1)), two, op)
        np.testing.assert_allclose(s2, s1, rtol=1e-8)
        np.testing.assert_allclose(e2[0], e2[1], rtol=1e-10)
        np.testing.assert_allclose(e2[0], e1[0], rtol=1e-8, atol=1e-12 * np.abs(e1).max())

    def test_general_field_residuals(self, sample_experiment):
        # the stationarity equations hold even for an arbitrary mapping
        model, snaps = sample_experiment
        problem = make_problem(model, snaps[:2], 16)
        pattern = snaps[0].dirichlet_dofs
        op = assemble_operator(model.quad, METRIC,
                               BoundaryConditions(dirichlet={int(d): 0.0 for d in pattern}))
        M = model.quad.n_points
        rng = np.random.default_rng(6)
        mapping = rng.integers(0, 16, size=(2, M))
        sig_star, eta, info = solve_stationarity(mapping, problem, op)
        assert info["cluster_residual"] < 1e-9
        # multiplier recovery makes each snapshot's force balance exact
        free = op.free
        for a, s in enumerate(problem.snapshots):
            sig = sig_star[mapping[a]] + model.quad.strains(eta[a]) @ METRIC.C
            internal = internal_forces(model.quad, sig)
            r = np.linalg.norm((internal - s.f)[free]) / max(np.linalg.norm(internal), 1e-300)
            assert r < 1e-9


class TestUpdates:
    def test_stress_update_without_multipliers(self, sample_experiment):
        model, snaps = sample_experiment
        problem = make_problem(model, snaps[:1], 4)
        rng = np.random.default_rng(7)
        sig_star = rng.normal(size=(4, 3)) * 1e8
        mapping = rng.integers(0, 4, size=(1, model.quad.n_points))
        out = update_stresses(sig_star, np.zeros((1, model.n_dof)), mapping, problem)
        np.testing.assert_array_equal(out[0], sig_star[mapping[0]])

    def test_mapping_matches_scan(self):
        rng = np.random.default_rng(8)
        db = np.hstack([rng.normal(size=(50, 3)) * 1e-3, rng.normal(size=(50, 3)) * 1e8])
        z = np.hstack([rng.normal(size=(200, 3)) * 1e-3, rng.normal(size=(200, 3)) * 1e8])
        mapping, _ = update_mapping(z, db, METRIC)
        emb_db = METRIC.embed_states(db)
        emb_z = METRIC.embed_states(z)
        for k in range(0, 200, 11):
            assert mapping[k] == np.sum((emb_db - emb_z[k]) ** 2, axis=1).argmin()

    def test_centroids_weighted_means(self):
        rng = np.random.default_rng(9)
        strains = rng.normal(size=(100, 3))
        w = rng.uniform(0.5, 1.5, 100)
        mapping = rng.integers(0, 7, 100)
        cents, empties = update_centroids(mapping, strains, w, 8)
        assert 7 in empties
        for i in range(7):
            mask = mapping == i
            np.testing.assert_allclose(
                cents[i], np.average(strains[mask], axis=0, weights=w[mask]), rtol=1e-13
            )

    def test_weighted_pair(self):
        cents, _ = update_centroids(
            np.zeros(2, dtype=int), np.array([[1.0, 0, 0], [2.0, 0, 0]]), np.array([1.0, 3.0]), 1
        )
        assert cents[0, 0] == pytest.approx(1.75, rel=1e-15)


class TestDdiSolve:
    def test_homogeneous_states_single_cluster(self):
        model, fem, problem = uniform_biaxial_problem(n_star=1, max_outer=5)
        result = ddi_solve(problem)
        np.testing.assert_allclose(
            result.eps_star[0], fem.eps[0], rtol=1e-8, atol=1e-9 * np.abs(fem.eps).max()
        )
        np.testing.assert_allclose(
            result.sig_star[0], fem.sig[0], rtol=1e-8, atol=1e-9 * np.abs(fem.sig).max()
        )
        assert result.converged

    def test_zero_snapshots_zero_states(self):
        model, fem, problem = uniform_biaxial_problem(n_star=1)
        zero = Snapshot(u=np.zeros(model.n_dof), f=np.zeros(model.n_dof),
                        dirichlet_dofs=problem.snapshots[0].dirichlet_dofs)
        problem.snapshots[0] = zero
        result = ddi_solve(problem)
        np.testing.assert_allclose(result.eps_star, 0.0, atol=1e-30)
        np.testing.assert_allclose(result.sig_star, 0.0, atol=1e-30)

    def test_objective_monotone_and_equilibrium(self, sample_experiment):
        model, snaps = sample_experiment
        problem = make_problem(model, snaps, 48, max_outer=12, seed=42)
        result = ddi_solve(problem)
        obj = np.array(result.objective_history)
        assert np.all(np.diff(obj) <= 1e-12 * np.maximum(np.abs(obj[:-1]), 1.0))
        assert result.equilibrium_residuals.max() < 1e-9
        assert result.cluster_weights.min() > 0.0

    def test_duplication_invariance(self, sample_experiment):
        model, snaps = sample_experiment
        eps = np.vstack([model.quad.strains(s.u) for s in snaps[:2]])
        w2 = np.tile(model.quad.w, 2)
        _, assign = kmeans_init(eps, w2, 24, seed=3, metric=METRIC)
        p1 = make_problem(model, snaps[:2], 24, max_outer=6)
        r1 = ddi_solve(p1, init_mapping=assign.reshape(2, -1))
        p2 = make_problem(model, snaps[:2] * 2, 24, max_outer=6)
        r2 = ddi_solve(p2, init_mapping=np.tile(assign.reshape(2, -1), (2, 1)))
        np.testing.assert_allclose(r2.eps_star, r1.eps_star, rtol=1e-10, atol=1e-14)
        np.testing.assert_allclose(r2.sig_star, r1.sig_star, rtol=1e-10, atol=1e-4)

    def test_scaling_covariance(self, sample_experiment):
        model, snaps = sample_experiment
        s = 2.0
        scaled = [
            Snapshot(u=s * sn.u, f=s * sn.f, dirichlet_dofs=sn.dirichlet_dofs, time=sn.time)
            for sn in snaps[:2]
        ]
        p1 = make_problem(model, snaps[:2], 16, max_outer=4, seed=5)
        p2 = make_problem(model, scaled, 16, max_outer=4, seed=5)
        r1 = ddi_solve(p1)
        r2 = ddi_solve(p2)
        np.testing.assert_allclose(r2.eps_star, s * r1.eps_star, rtol=1e-10)
        np.testing.assert_allclose(r2.sig_star, s * r1.sig_star, rtol=1e-10)

    def test_ratio_warning(self, sample_experiment):
        model, snaps = sample_experiment
        with pytest.warns(UserWarning, match="ratio"):
            DDIProblem(snapshots=list(snaps), model=model, metric=METRIC, n_star=1000)

    def test_mismatched_dirichlet_patterns_rejected(self, sample_experiment):
        model, snaps = sample_experiment
        bad = Snapshot(u=snaps[0].u, f=snaps[0].f, dirichlet_dofs=np.array([0, 1, 2]))
        with pytest.raises(ValueError, match="pattern"):
            make_problem(model, [snaps[0], bad], 4)
