"""Phase-space data model: norms, embeddings, search, rotation minimization."""

import numpy as np
import pytest

from ddmech.errors import UnsupportedMetricError
from ddmech.phase_space import (
    LocalState,
    MaterialDatabase,
    Metric,
    build_index,
    global_distance,
    load_database_csv,
    local_norm,
    mandel_to_tensor,
    nearest_state,
    optimal_rotation_2d,
    rotate_states,
    save_database_csv,
    tensor_to_mandel,
)

HOOKE = Metric.isotropic_plane_strain(100e9, 0.35)


def random_spd_metric(rng) -> Metric:
    A = rng.normal(size=(3, 3))
    C = A @ A.T + 3.0 * np.eye(3)
    return Metric(C * 1e9)


def rotate_mandel_brute(m, theta):
    """Independent conjugation path through full 2x2 tensor algebra."""
    t = mandel_to_tensor(m)
    T = np.array([[t[0], t[2]], [t[2], t[1]]])
    c, s = np.cos(theta), np.sin(theta)
    R = np.array([[c, -s], [s, c]])
    Th = R.T @ T @ R
    return tensor_to_mandel(np.array([Th[0, 0], Th[1, 1], Th[0, 1]]))


def state_distance(z, y, metric):
    d_eps = z[:3] - y[:3]
    d_sig = z[3:] - y[3:]
    return np.sqrt(d_eps @ metric.C @ d_eps + d_sig @ metric.C_inv @ d_sig)


def angle_scan_distance(z, y, metric, n=100_000):
    """Brute-force orbit distance: dense global angle scan plus a local
    refinement around the coarse minimum (kills the grid discretization
    error of the quadratic minimum)."""

    def scan(thetas):
        rot = rotate_states(np.broadcast_to(y, (thetas.size, 6)).copy(), thetas)
        diff = metric.embed_states(np.broadcast_to(z, rot.shape)) - metric.embed_states(rot)
        d2 = np.sum(diff**2, axis=1)
        k = int(np.argmin(d2))
        return thetas[k], np.sqrt(d2[k])

    step = np.pi / n
    t0, _ = scan(np.linspace(-np.pi / 2, np.pi / 2, n + 1))
    _, best = scan(np.linspace(t0 - 2 * step, t0 + 2 * step, n + 1))
    return best


class TestLocalNorm:
    def test_zero_state(self):
        assert local_norm(LocalState.zero(), HOOKE) == 0.0

    def test_identity_metric_unit_strain(self):
        m = Metric(np.eye(3))
        z = LocalState(np.array([1.0, 0, 0]), np.zeros(3))
        assert local_norm(z, m) == pytest.approx(1.0, rel=1e-14)

    def test_plane_strain_stiffness_entry(self):
        E, nu = 100e9, 0.35
        c11 = E * (1 - nu) / ((1 + nu) * (1 - 2 * nu))
        z = LocalState(np.array([1e-3, 0, 0]), np.zeros(3))
        assert local_norm(z, HOOKE) == pytest.approx(np.sqrt(c11) * 1e-3, rel=1e-14)


class TestGlobalDistance:
    def test_identical_states(self):
        rng = np.random.default_rng(0)
        Z = rng.normal(size=(7, 6))
        assert global_distance(Z, Z.copy(), np.ones(7), HOOKE) == 0.0

    def test_single_point_arithmetic(self):
        m = Metric(np.eye(3))
        z = np.zeros((1, 6))
        y = np.zeros((1, 6))
        y[0, 0] = 3.0  # |z - y| = 3 under identity metric
        assert global_distance(z, y, [2.0], m) == pytest.approx(np.sqrt(18.0), rel=1e-14)

    def test_single_term_stress_perturbation(self):
        rng = np.random.default_rng(1)
        Z = rng.normal(size=(5, 6)) * 1e-3
        Y = Z.copy()
        dsig = rng.normal(size=3) * 1e6
        Y[2, 3:] += dsig
        w = rng.uniform(0.5, 2.0, size=5)
        expect = np.sqrt(w[2] * dsig @ HOOKE.C_inv @ dsig)
        assert global_distance(Z, Y, w, HOOKE) == pytest.approx(expect, rel=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            global_distance(np.zeros((3, 6)), np.zeros((3, 6)), np.ones(2), HOOKE)


class TestNearestState:
    def test_database_member(self):
        rng = np.random.default_rng(2)
        states = rng.normal(size=(20, 6)) * 1e-3
        db = build_index(states, HOOKE)
        idx, dist = nearest_state(states[7], db)
        assert idx == 7
        assert dist == 0.0

    def test_exact_tie_lowest_index(self):
        u = np.array([1e-3, 2e-3, 0.5e-3, 1e6, -2e6, 3e6])
        db = build_index(np.vstack([np.zeros(6), 2 * u]), HOOKE)
        idx, dist = nearest_state(u, db)
        assert idx == 0
        assert dist == pytest.approx(local_norm(LocalState(u[:3], u[3:]), HOOKE), rel=1e-12)

    def test_matches_linear_scan(self):
        rng = np.random.default_rng(3)
        states = np.hstack([rng.normal(size=(10_000, 3)) * 1e-3, rng.normal(size=(10_000, 3)) * 1e8])
        db = build_index(states, HOOKE)
        queries = np.hstack([rng.normal(size=(1000, 3)) * 1e-3, rng.normal(size=(1000, 3)) * 1e8])
        idx, d2 = db.query(queries)
        emb_db = HOOKE.embed_states(states)
        emb_q = HOOKE.embed_states(queries)
        for k in range(0, 1000, 7):
            scan = np.sum((emb_db - emb_q[k]) ** 2, axis=1)
            assert idx[k] == scan.argmin()
            assert d2[k] == pytest.approx(scan.min(), rel=1e-10, abs=1e-300)

    def test_empty_database_rejected(self):
        with pytest.raises(ValueError):
            MaterialDatabase(np.zeros((0, 6)), HOOKE)

    def test_repeated_queries_identical(self):
        rng = np.random.default_rng(4)
        states = rng.normal(size=(50, 6))
        db = build_index(states, HOOKE)
        q = rng.normal(size=(30, 6))
        i1, _ = db.query(q)
        i2, _ = db.query(q)
        assert np.array_equal(i1, i2)


class TestMetricEmbedding:
    def test_embedding_matches_direct_norm(self):
        rng = np.random.default_rng(5)
        for _ in range(5):
            m = random_spd_metric(rng)
            Z = np.hstack([rng.normal(size=(200, 3)) * 1e-3, rng.normal(size=(200, 3)) * 1e8])
            emb = m.embed_states(Z)
            direct = np.array(
                [Z[i, :3] @ m.C @ Z[i, :3] + Z[i, 3:] @ m.C_inv @ Z[i, 3:] for i in range(200)]
            )
            np.testing.assert_allclose(np.sum(emb**2, axis=1), direct, rtol=1e-12)

    def test_inverse_consistency(self):
        rng = np.random.default_rng(6)
        m = random_spd_metric(rng)
        np.testing.assert_allclose(m.C @ m.C_inv, np.eye(3), atol=1e-12)

    def test_non_spd_rejected(self):
        with pytest.raises(ValueError):
            Metric(-np.eye(3))

    def test_anisotropic_detected(self):
        C = np.diag([3e9, 2e9, 1e9])
        assert not Metric(C).is_isotropic()
        assert HOOKE.is_isotropic()


class TestOptimalRotation:
    def test_recovers_rotation_orbit(self):
        rng = np.random.default_rng(7)
        for phi in (-1.2, -0.3, 0.0, 0.47, 1.5):
            z = np.hstack([rng.normal(size=3) * 1e-3, rng.normal(size=3) * 1e8])
            y = np.hstack(
                [rotate_mandel_brute(z[:3], -phi), rotate_mandel_brute(z[3:], -phi)]
            )
            theta, y_rot, dist = optimal_rotation_2d(z, y, HOOKE)
            # dist is a sqrt of a cancellation-limited quantity: ~1e-6 relative floor
            assert dist <= 1e-6 * local_norm(LocalState(z[:3], z[3:]), HOOKE)
            assert abs((theta - phi + np.pi / 2) % np.pi - np.pi / 2) < 1e-9
            np.testing.assert_allclose(y_rot.as_vector(), z, rtol=1e-8, atol=1e-12)

    def test_identical_states(self):
        z = np.array([1e-3, -2e-3, 0.5e-3, 1e8, 2e8, -3e8])
        theta, y_rot, dist = optimal_rotation_2d(z, z, HOOKE)
        assert theta == pytest.approx(0.0, abs=1e-14)
        assert dist == pytest.approx(0.0, abs=1e-10)

    def test_matches_dense_angle_scan(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            z = np.hstack([rng.normal(size=3) * 1e-3, rng.normal(size=3) * 1e8])
            y = np.hstack([rng.normal(size=3) * 1e-3, rng.normal(size=3) * 1e8])
            _, _, dist = optimal_rotation_2d(z, y, HOOKE)
            best = angle_scan_distance(z, y, HOOKE)
            assert dist == pytest.approx(best, rel=1e-10, abs=1e-30)
            assert dist <= state_distance(z, y, HOOKE) * (1 + 1e-12)

    def test_rotate_states_matches_tensor_algebra(self):
        rng = np.random.default_rng(9)
        z = np.hstack([rng.normal(size=3), rng.normal(size=3)])
        for th in (-0.8, 0.1, 1.0):
            fast = rotate_states(z[None, :], np.array([th]))[0]
            ref = np.hstack([rotate_mandel_brute(z[:3], th), rotate_mandel_brute(z[3:], th)])
            np.testing.assert_allclose(fast, ref, rtol=1e-13, atol=1e-15)

    def test_simultaneous_rotation_invariance(self):
        rng = np.random.default_rng(10)
        z = np.hstack([rng.normal(size=3) * 1e-3, rng.normal(size=3) * 1e8])
        y = np.hstack([rng.normal(size=3) * 1e-3, rng.normal(size=3) * 1e8])
        _, _, d0 = optimal_rotation_2d(z, y, HOOKE)
        for phi in (0.3, -1.1):
            z2 = rotate_states(z[None, :], np.array([phi]))[0]
            y2 = rotate_states(y[None, :], np.array([phi]))[0]
            _, _, d = optimal_rotation_2d(z2, y2, HOOKE)
            assert d == pytest.approx(d0, rel=1e-10)

    def test_anisotropic_metric_rejected(self):
        m = Metric(np.diag([3e9, 2e9, 1e9]))
        with pytest.raises(UnsupportedMetricError):
            optimal_rotation_2d(np.zeros(6), np.ones(6), m)

    def test_theta_range(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            z = rng.normal(size=6)
            y = rng.normal(size=6)
            theta, _, _ = optimal_rotation_2d(z, y, Metric(np.eye(3)))
            assert -np.pi / 2 < theta <= np.pi / 2


class TestIsotropicQuery:
    def test_exact_against_scan(self):
        rng = np.random.default_rng(12)
        states = np.hstack([rng.normal(size=(2000, 3)) * 1e-3, rng.normal(size=(2000, 3)) * 1e8])
        db = build_index(states, HOOKE)
        queries = np.hstack([rng.normal(size=(100, 3)) * 1e-3, rng.normal(size=(100, 3)) * 1e8])
        idx, theta, d2 = db.query_isotropic(queries, k0=8)
        for k in range(100):
            d_all = np.array(
                [optimal_rotation_2d(queries[k], states[j], HOOKE)[2] ** 2 for j in range(2000)]
            )
            assert d2[k] == pytest.approx(d_all.min(), rel=1e-9, abs=1e-300)
            assert d_all[idx[k]] == pytest.approx(d_all.min(), rel=1e-9, abs=1e-300)

    def test_never_worse_than_standard(self):
        rng = np.random.default_rng(13)
        states = np.hstack([rng.normal(size=(500, 3)) * 1e-3, rng.normal(size=(500, 3)) * 1e8])
        db = build_index(states, HOOKE)
        queries = np.hstack([rng.normal(size=(200, 3)) * 1e-3, rng.normal(size=(200, 3)) * 1e8])
        _, d2_std = db.query(queries)
        _, _, d2_iso = db.query_isotropic(queries)
        assert np.all(d2_iso <= d2_std * (1 + 1e-12) + 1e-300)

    def test_verify_mode_passes(self):
        rng = np.random.default_rng(14)
        states = np.hstack([rng.normal(size=(300, 3)) * 1e-3, rng.normal(size=(300, 3)) * 1e8])
        db = build_index(states, HOOKE)
        queries = np.hstack([rng.normal(size=(40, 3)) * 1e-3, rng.normal(size=(40, 3)) * 1e8])
        db.query_isotropic(queries, k0=4, verify_every=1)  # raises on mismatch


class TestCsvRoundTrip:
    def test_write_read_write_identical(self, tmp_path):
        rng = np.random.default_rng(15)
        states = np.hstack([rng.normal(size=(64, 3)) * 1e-3, rng.normal(size=(64, 3)) * 1e8])
        p1 = tmp_path / "db1.csv"
        p2 = tmp_path / "db2.csv"
        save_database_csv(p1, states, comments=["provenance test"])
        loaded, comments = load_database_csv(p1, metric=HOOKE, return_comments=True)
        np.testing.assert_allclose(loaded.states_mandel, states, rtol=1e-15)
        save_database_csv(p2, loaded, comments=comments)
        assert p1.read_bytes() == p2.read_bytes()

    def test_header_and_tensor_components(self, tmp_path):
        states = np.array([[1e-3, 2e-3, np.sqrt(2) * 3e-3, 1e8, 2e8, np.sqrt(2) * 3e8]])
        p = tmp_path / "db.csv"
        save_database_csv(p, states)
        lines = p.read_text().splitlines()
        assert lines[0] == "eps_xx,eps_yy,eps_xy,sig_xx,sig_yy,sig_xy"
        row = [float(v) for v in lines[1].split(",")]
        assert row[2] == pytest.approx(3e-3, rel=1e-15)  # xy stored as tensor component
        assert row[5] == pytest.approx(3e8, rel=1e-15)
