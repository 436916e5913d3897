"""Synthetic inputs for the identification/solver studies.

Linear isotropic plane-strain constitutive evaluation, regular
strain-grid databases, the three parametric geometries (quarter plate
with a hole, L-shaped beam, multi-hole square sample) and virtual biaxial
experiments that produce identification snapshots.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _meshgen
from .ddi import Snapshot
from .errors import GeometryError
from .fe_core import (
    BoundaryConditions,
    DiscreteModel,
    Mesh,
    assemble_operator,
    build_model,
    internal_forces,
)
from .phase_space import MaterialDatabase, Metric, mandel_to_tensor, tensor_to_mandel

REFERENCE_E = 217.5e9
REFERENCE_NU = 0.3

# strain bounds (min, max) per component of the synthetic grid databases
GRID_BOUNDS = {
    "eps_xx": (-0.002, 0.005),
    "eps_xy": (-0.002, 0.005),
    "eps_yy": (-0.015, 0.0025),
}

REG_PRESETS = {"REG-DB1": 30, "REG-DB2": 50, "REG-DB3": 100}


@dataclass(frozen=True)
class LinearElasticLaw:
    """Isotropic linear elasticity, plane strain."""

    E: float
    nu: float

    def __post_init__(self):
        if self.E <= 0:
            raise ValueError("Young's modulus must be positive")
        if not (-1.0 < self.nu < 0.5):
            raise ValueError("Poisson ratio must lie in (-1, 0.5)")

    @property
    def lame(self) -> tuple[float, float]:
        lam = self.E * self.nu / ((1.0 + self.nu) * (1.0 - 2.0 * self.nu))
        mu = self.E / (2.0 * (1.0 + self.nu))
        return lam, mu

    def mandel_stiffness(self) -> np.ndarray:
        lam, mu = self.lame
        return np.array(
            [
                [lam + 2 * mu, lam, 0.0],
                [lam, lam + 2 * mu, 0.0],
                [0.0, 0.0, 2 * mu],
            ]
        )

    def to_metric(self) -> Metric:
        return Metric(self.mandel_stiffness())


def hooke_stress(eps: np.ndarray, law: LinearElasticLaw) -> np.ndarray:
    """Stress of Mandel strain rows under `law`: s = lam tr(e) I + 2 mu e."""
    return np.asarray(eps, dtype=float) @ law.mandel_stiffness()


@dataclass(frozen=True)
class StrainGridSpec:
    """Cartesian sampling box: per-component (min, max, count)."""

    eps_xx: tuple[float, float, int]
    eps_xy: tuple[float, float, int]
    eps_yy: tuple[float, float, int]

    def __post_init__(self):
        for name in ("eps_xx", "eps_xy", "eps_yy"):
            lo, hi, n = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"{name}: min must be below max")
            if n < 2:
                raise ValueError(f"{name}: count must be at least 2")

    @classmethod
    def preset(cls, name: str) -> "StrainGridSpec":
        if name not in REG_PRESETS:
            raise ValueError(f"unknown database preset {name!r}")
        n = REG_PRESETS[name]
        return cls.cube(n)

    @classmethod
    def cube(cls, n: int) -> "StrainGridSpec":
        """n^3 grid over the standard strain bounds."""
        return cls(
            eps_xx=(*GRID_BOUNDS["eps_xx"], n),
            eps_xy=(*GRID_BOUNDS["eps_xy"], n),
            eps_yy=(*GRID_BOUNDS["eps_yy"], n),
        )


def gen_regular_db(
    spec: StrainGridSpec, law: LinearElasticLaw, metric: Metric | None = None
) -> MaterialDatabase:
    """Database on the Cartesian strain grid, stresses from the exact law.

    The nearest-neighbor index uses `metric` (defaults to the law's
    stiffness; solvers re-embed with their own metric when it differs).
    """
    axes = [np.linspace(lo, hi, n) for lo, hi, n in (spec.eps_xx, spec.eps_xy, spec.eps_yy)]
    xx, xy, yy = np.meshgrid(*axes, indexing="ij")
    eps_t = np.column_stack([xx.ravel(), yy.ravel(), xy.ravel()])  # tensor components
    eps = tensor_to_mandel(eps_t)
    sig = hooke_stress(eps, law)
    tensor_rows = np.hstack([eps_t, mandel_to_tensor(sig)])
    return MaterialDatabase(np.hstack([eps, sig]), metric or law.to_metric(), tensor_rows=tensor_rows)


# -- meshes -------------------------------------------------------------------

SAMPLE_HOLES = [
    (0.26, 0.32, 0.08),
    (0.66, 0.32, 0.08),
    (0.42, 0.68, 0.08),
    (0.82, 0.68, 0.08),
    (0.82, 0.18, 0.06),
]

_MESH_KINDS = ("plate_hole_quarter", "l_beam", "perforated_sample")


def gen_mesh(kind: str, params: dict | None = None, target_element_size: float = 0.05) -> Mesh:
    """Parametric mesh of one of the study geometries.

    plate_hole_quarter : structured Q4 fan between the hole arc and the
        outer rectangle; params R, width_factor, height_factor, grading,
        optional explicit n_arc / n_rad.
    l_beam : unstructured T6; params H plus the section factors
        (width_factor, web_factor, flange_factor, fillet_factor,
        hole_radius_factor, hole_center).
    perforated_sample : unstructured T6 unit square with circular holes;
        params side, holes=[(cx, cy, r), ...].
    """
    p = dict(params or {})
    h = float(target_element_size)
    if h <= 0:
        raise GeometryError("target element size must be positive")
    if kind == "plate_hole_quarter":
        R = float(p.pop("R", 1.0))
        a = 0.5 * float(p.pop("width_factor", 12.8)) * R
        b = 0.5 * float(p.pop("height_factor", 20.0)) * R
        grading = float(p.pop("grading", 3.0))
        mean_ray = 0.5 * ((a - R) + (b - R))
        n_arc = int(p.pop("n_arc", 0)) or max(8, round(0.5 * np.pi * R / (0.35 * h)))
        n_rad = int(p.pop("n_rad", 0)) or max(6, round(mean_ray / h))
        _reject_unknown(p, kind)
        return _meshgen.plate_hole_quarter_mesh(R, a, b, n_arc, n_rad, grading)
    if kind == "l_beam":
        H = float(p.pop("H", 1.0))
        loops = _meshgen.l_beam_loops(
            H,
            W_f=float(p.pop("width_factor", 0.6)),
            w_f=float(p.pop("web_factor", 0.2)),
            h_f=float(p.pop("flange_factor", 0.3)),
            r_f=float(p.pop("fillet_factor", 0.02)),
            hole_r=float(p.pop("hole_radius_factor", 0.075)),
            hole_c=tuple(p.pop("hole_center", (0.2, 0.5))),
        )
        _reject_unknown(p, kind)
        return _meshgen.delaunay_t6_mesh(loops, h)
    if kind == "perforated_sample":
        side = float(p.pop("side", 1.0))
        holes = [tuple(map(float, hh)) for hh in p.pop("holes", SAMPLE_HOLES)]
        _reject_unknown(p, kind)
        loops = _meshgen.square_with_holes_loops(side, holes)
        return _meshgen.delaunay_t6_mesh(loops, h)
    raise GeometryError(f"unknown mesh kind {kind!r}; expected one of {_MESH_KINDS}")


def _reject_unknown(p: dict, kind: str) -> None:
    if p:
        raise GeometryError(f"unknown parameters for {kind}: {sorted(p)}")


def _set_dofs(mesh: Mesh, set_name: str, comp: int) -> np.ndarray:
    if set_name not in mesh.node_sets:
        raise GeometryError(f"mesh has no node set {set_name!r}")
    return 2 * mesh.node_sets[set_name] + comp


def plate_hole_bcs(mesh: Mesh, avg_strain: float = -0.004) -> BoundaryConditions:
    """Quarter-symmetry supports plus vertical compression of the top edge.

    `avg_strain` is the average longitudinal strain of the full plate; the
    top edge of the quarter model moves by avg_strain * half_height.
    """
    half_height = mesh.nodes[:, 1].max()
    dirichlet: dict[int, float] = {}
    for dof in _set_dofs(mesh, "bottom", 1):
        dirichlet[int(dof)] = 0.0
    for dof in _set_dofs(mesh, "left", 0):
        dirichlet[int(dof)] = 0.0
    for dof in _set_dofs(mesh, "top", 1):
        dirichlet[int(dof)] = avg_strain * half_height
    return BoundaryConditions(dirichlet=dirichlet)


def l_beam_bcs(mesh: Mesh, top_disp_factor: float = 0.002) -> BoundaryConditions:
    """Fixed base, horizontal displacement (factor * height) imposed at the top."""
    H = mesh.nodes[:, 1].max()
    dirichlet: dict[int, float] = {}
    for node in mesh.node_sets["base"]:
        dirichlet[2 * int(node)] = 0.0
        dirichlet[2 * int(node) + 1] = 0.0
    for dof in _set_dofs(mesh, "top", 0):
        dirichlet[int(dof)] = top_disp_factor * H
    return BoundaryConditions(dirichlet=dirichlet)


# -- load history and virtual experiments -------------------------------------


@dataclass(frozen=True)
class LoadHistory:
    """Piecewise-linear biaxial load program.

    `times` is strictly increasing; `values[k] = (ax, ay)` are the edge
    traction amplitudes (Pa, positive = tension) applied on the right (x)
    and top (y) edges at times[k].
    """

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "times", np.asarray(self.times, dtype=float).reshape(-1))
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float).reshape(-1, 2))
        if self.times.size != self.values.shape[0]:
            raise ValueError("times and values lengths differ")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")

    def at(self, t: float) -> tuple[float, float]:
        ax = float(np.interp(t, self.times, self.values[:, 0]))
        ay = float(np.interp(t, self.times, self.values[:, 1]))
        return ax, ay

    @property
    def t_end(self) -> float:
        return float(self.times[-1])

    @classmethod
    def biaxial_default(cls, amp_x: float = 1.0e9, amp_y: float = -1.5e9) -> "LoadHistory":
        """Two-peak program: x-load rises to amp_x at t=1 then unloads;
        y-load ramps monotonically to amp_y at t=2."""
        return cls(
            times=np.array([0.0, 1.0, 2.0]),
            values=np.array([[0.0, 0.0], [amp_x, 0.5 * amp_y], [0.0, amp_y]]),
        )


def edge_load_vector(mesh: Mesh, side_set: str, comp: int) -> np.ndarray:
    """Consistent nodal forces of a unit traction component on a side set.

    Rows of a side set are (a, b) for linear edges or (a, b, mid) for
    quadratic ones; weights are L*(1/2, 1/2) and L*(1/6, 1/6, 2/3).
    """
    if side_set not in mesh.side_sets:
        raise GeometryError(f"mesh has no side set {side_set!r}")
    edges = mesh.side_sets[side_set]
    f = np.zeros(mesh.n_dof)
    L = np.linalg.norm(mesh.nodes[edges[:, 1]] - mesh.nodes[edges[:, 0]], axis=1)
    if edges.shape[1] == 2:
        for j, wj in ((0, 0.5), (1, 0.5)):
            np.add.at(f, 2 * edges[:, j] + comp, wj * L)
    else:
        for j, wj in ((0, 1.0 / 6.0), (1, 1.0 / 6.0), (2, 2.0 / 3.0)):
            np.add.at(f, 2 * edges[:, j] + comp, wj * L)
    return f


def sample_bcs(mesh: Mesh) -> tuple[dict[int, float], np.ndarray, np.ndarray]:
    """Support pattern and unit load vectors of the biaxial sample test.

    Left edge rolls in y (u_x = 0), bottom edge rolls in x (u_y = 0);
    returns (dirichlet, unit right-edge x-load, unit top-edge y-load).
    """
    dirichlet: dict[int, float] = {}
    for dof in _set_dofs(mesh, "left", 0):
        dirichlet[int(dof)] = 0.0
    for dof in _set_dofs(mesh, "bottom", 1):
        dirichlet[int(dof)] = 0.0
    fx = edge_load_vector(mesh, "right", 0)
    fy = edge_load_vector(mesh, "top", 1)
    return dirichlet, fx, fy


def run_virtual_experiment(
    mesh: Mesh,
    law: LinearElasticLaw,
    history: LoadHistory,
    n_snapshots: int,
) -> tuple[DiscreteModel, list[Snapshot]]:
    """Simulated biaxial test: one linear solve per sampled time.

    Edge tractions follow `history`; displacements are recorded at
    n_snapshots uniform times over (0, t_end].  Applied nodal forces are
    known exactly at free DOFs (the supports are the only Dirichlet DOFs),
    so each snapshot carries the force information identification needs.

    Returns the shared model and the snapshot list; each snapshot logs the
    applied edge resultants.
    """
    dirichlet, fx_unit, fy_unit = sample_bcs(mesh)
    bcs = BoundaryConditions(dirichlet=dirichlet)
    model = build_model(mesh, bcs)
    op = assemble_operator(model.quad, law.to_metric(), bcs)
    dir_dofs = np.fromiter(dirichlet.keys(), dtype=np.int64, count=len(dirichlet))
    snapshots = []
    times = history.t_end * (np.arange(1, n_snapshots + 1) / n_snapshots)
    for t in times:
        ax, ay = history.at(float(t))
        f = ax * fx_unit + ay * fy_unit
        f[dir_dofs] = 0.0
        u = op.solve(f)
        snapshots.append(
            Snapshot(
                u=u,
                f=f,
                dirichlet_dofs=dir_dofs,
                time=float(t),
                resultants={"right_x": float(ax * fx_unit.sum()), "top_y": float(ay * fy_unit.sum())},
            )
        )
    return model, snapshots
