"""Constitutive evaluation, grid databases, parametric meshes, experiments."""

import numpy as np
import pytest

from ddmech.datagen import (
    GRID_BOUNDS,
    LinearElasticLaw,
    LoadHistory,
    StrainGridSpec,
    gen_mesh,
    gen_regular_db,
    hooke_stress,
    l_beam_bcs,
    plate_hole_bcs,
    run_virtual_experiment,
)
from ddmech.errors import GeometryError
from ddmech.fe_core import build_model, build_quadrature, fem_reference_solve, internal_forces
from ddmech.phase_space import Metric, tensor_to_mandel

LAW = LinearElasticLaw(217.5e9, 0.3)


class TestHookeStress:
    def test_zero(self):
        np.testing.assert_array_equal(hooke_stress(np.zeros(3), LAW), np.zeros(3))

    def test_pure_shear(self):
        gamma = 1.3e-3
        eps = tensor_to_mandel([0.0, 0.0, gamma])
        sig = hooke_stress(eps, LAW)
        _, mu = LAW.lame
        assert sig[0] == 0.0 and sig[1] == 0.0
        assert sig[2] / np.sqrt(2) == pytest.approx(2 * mu * gamma, rel=1e-14)

    def test_lame_closed_form(self):
        lam = 217.5e9 * 0.3 / (1.3 * 0.4)
        mu = 217.5e9 / 2.6
        sig = hooke_stress(np.array([1e-3, 0, 0]), LAW)
        assert sig[0] == pytest.approx((lam + 2 * mu) * 1e-3, rel=1e-14)
        assert sig[1] == pytest.approx(lam * 1e-3, rel=1e-14)

    def test_linearity_exact(self):
        rng = np.random.default_rng(0)
        e1, e2 = rng.normal(size=3), rng.normal(size=3)
        a, b = 2.0, -0.5  # exactly representable scalars
        lhs = hooke_stress(a * e1 + b * e2, LAW)
        rhs = a * hooke_stress(e1, LAW) + b * hooke_stress(e2, LAW)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-13)

    def test_invalid_law(self):
        with pytest.raises(ValueError):
            LinearElasticLaw(-1.0, 0.3)
        with pytest.raises(ValueError):
            LinearElasticLaw(1e9, 0.5)


class TestRegularDb:
    def test_tiny_grid_corners(self):
        spec = StrainGridSpec(eps_xx=(-1e-3, 1e-3, 2), eps_xy=(-2e-3, 2e-3, 2), eps_yy=(0.0, 5e-4, 2))
        db = gen_regular_db(spec, LAW)
        assert len(db) == 8
        rows = db.tensor_rows
        assert set(map(tuple, rows[:, :3])) == {
            (x, yy, xy)
            for x in (-1e-3, 1e-3)
            for xy in (-2e-3, 2e-3)
            for yy in (0.0, 5e-4)
        }

    def test_preset_size_and_extreme_state(self):
        db = gen_regular_db(StrainGridSpec.preset("REG-DB1"), LAW)
        assert len(db) == 27_000
        rows = db.tensor_rows
        extreme = (
            GRID_BOUNDS["eps_xx"][1],
            GRID_BOUNDS["eps_yy"][1],
            GRID_BOUNDS["eps_xy"][1],
        )
        assert any(tuple(r) == extreme for r in rows[:, :3])
        for name, col in (("eps_xx", 0), ("eps_yy", 1), ("eps_xy", 2)):
            assert rows[:, col].min() == GRID_BOUNDS[name][0]
            assert rows[:, col].max() == GRID_BOUNDS[name][1]

    def test_states_satisfy_law_bitwise(self):
        db = gen_regular_db(StrainGridSpec.cube(5), LAW)
        states = db.states_mandel
        np.testing.assert_array_equal(states[:, 3:], hooke_stress(states[:, :3], LAW))

    def test_bad_spec(self):
        with pytest.raises(ValueError):
            StrainGridSpec(eps_xx=(1e-3, -1e-3, 2), eps_xy=(0, 1, 2), eps_yy=(0, 1, 2))
        with pytest.raises(ValueError):
            StrainGridSpec(eps_xx=(0, 1, 1), eps_xy=(0, 1, 2), eps_yy=(0, 1, 2))


class TestMeshes:
    def test_plate_area(self):
        mesh = gen_mesh("plate_hole_quarter", {"R": 1.0}, target_element_size=0.4)
        quad = build_quadrature(mesh)
        analytic = 6.4 * 10.0 - 0.25 * np.pi
        assert quad.w.sum() == pytest.approx(analytic, rel=0.01)

    def test_lbeam_dimensions(self):
        mesh = gen_mesh("l_beam", {"H": 1.0}, target_element_size=0.04)
        assert mesh.nodes[:, 0].min() == pytest.approx(0.0, abs=1e-12)
        assert mesh.nodes[:, 0].max() == pytest.approx(0.6, abs=1e-12)
        assert mesh.nodes[:, 1].min() == pytest.approx(0.0, abs=1e-12)
        assert mesh.nodes[:, 1].max() == pytest.approx(1.0, abs=1e-12)
        d = np.linalg.norm(mesh.nodes[mesh.node_sets["hole"]] - [0.2, 0.5], axis=1)
        assert np.all(np.abs(d / 0.075 - 1.0) < 0.01)
        build_quadrature(mesh)  # positive Jacobians everywhere

    def test_infeasible_geometry(self):
        with pytest.raises(GeometryError):
            gen_mesh("l_beam", {"hole_radius_factor": 0.25}, 0.04)  # exceeds web width
        with pytest.raises(GeometryError):
            gen_mesh("perforated_sample", {"holes": [(0.05, 0.5, 0.2)]}, 0.05)

    def test_unknown_kind_and_params(self):
        with pytest.raises(GeometryError):
            gen_mesh("donut", {}, 0.05)
        with pytest.raises(GeometryError):
            gen_mesh("l_beam", {"bogus": 1}, 0.05)

    def test_sample_area_converges(self):
        analytic = 1.0 - 4 * np.pi * 0.08**2 - np.pi * 0.06**2
        errs = []
        for h in (0.06, 0.03, 0.015):
            quad = build_quadrature(gen_mesh("perforated_sample", {}, h))
            errs.append(abs(quad.w.sum() - analytic) / analytic)
        assert errs[2] < errs[1] < errs[0]

    def test_plate_bcs_and_fem(self):
        mesh = gen_mesh("plate_hole_quarter", {"n_arc": 10, "n_rad": 14}, 0.5)
        model = build_model(mesh, plate_hole_bcs(mesh, avg_strain=-0.004))
        fem = fem_reference_solve(model, LAW)
        # compression: top edge moved down, average eps_yy near -0.4%
        mean_eyy = np.sum(model.quad.w * fem.eps[:, 1]) / model.quad.w.sum()
        assert mean_eyy == pytest.approx(-0.004, rel=0.15)

    def test_lbeam_bcs_and_fem(self):
        mesh = gen_mesh("l_beam", {}, 0.05)
        model = build_model(mesh, l_beam_bcs(mesh, top_disp_factor=0.002))
        fem = fem_reference_solve(model, LAW)
        top = mesh.node_sets["top"]
        np.testing.assert_allclose(fem.u[2 * top], 0.002, rtol=1e-12)
        base = mesh.node_sets["base"]
        np.testing.assert_array_equal(fem.u[2 * base], 0.0)
        assert fem.energy > 0


class TestLoadHistory:
    def test_interpolation(self):
        h = LoadHistory.biaxial_default(amp_x=2.0, amp_y=-4.0)
        assert h.at(0.5) == (1.0, -1.0)
        assert h.at(1.0) == (2.0, -2.0)
        assert h.at(1.5) == (1.0, -3.0)
        assert h.at(2.0) == (0.0, -4.0)

    def test_strictly_increasing_times(self):
        with pytest.raises(ValueError):
            LoadHistory(times=[0.0, 1.0, 1.0], values=[[0, 0], [1, 1], [2, 2]])


@pytest.fixture(scope="module")
def small_run():
    mesh = gen_mesh("perforated_sample", {}, 0.07)
    model, snaps = run_virtual_experiment(mesh, LAW, LoadHistory.biaxial_default(), 4)
    return mesh, model, snaps


class TestVirtualExperiment:

    def test_zero_history(self):
        mesh = gen_mesh("perforated_sample", {}, 0.09)
        hist = LoadHistory(times=[0.0, 1.0], values=[[0.0, 0.0], [0.0, 0.0]])
        _, snaps = run_virtual_experiment(mesh, LAW, hist, 2)
        for s in snaps:
            np.testing.assert_array_equal(s.u, 0.0)
            np.testing.assert_array_equal(s.f, 0.0)

    def test_linearity_in_amplitude(self):
        mesh = gen_mesh("perforated_sample", {}, 0.09)
        h1 = LoadHistory(times=[0.0, 1.0], values=[[0.0, 0.0], [1e9, -1e9]])
        h2 = LoadHistory(times=[0.0, 1.0], values=[[0.0, 0.0], [2e9, -2e9]])
        _, s1 = run_virtual_experiment(mesh, LAW, h1, 1)
        _, s2 = run_virtual_experiment(mesh, LAW, h2, 1)
        np.testing.assert_allclose(s2[0].u, 2.0 * s1[0].u, rtol=1e-12, atol=1e-18)

    def test_snapshot_equilibrium(self, small_run):
        _, model, snaps = small_run
        free = np.setdiff1d(np.arange(model.n_dof), snaps[0].dirichlet_dofs)
        for s in snaps:
            sig = hooke_stress(model.quad.strains(s.u), LAW)
            internal = internal_forces(model.quad, sig)
            resid = np.linalg.norm((internal - s.f)[free]) / np.linalg.norm(internal)
            assert resid < 1e-9

    def test_states_per_snapshot_and_flags(self, small_run):
        mesh, model, snaps = small_run
        assert len(snaps) == 4
        for s in snaps:
            assert model.quad.strains(s.u).shape == (model.quad.n_points, 3)
            np.testing.assert_array_equal(s.f[s.dirichlet_dofs], 0.0)
        assert snaps[-1].resultants["top_y"] != 0.0
