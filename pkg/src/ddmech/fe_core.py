"""2D plane-strain finite-element kernel.

Supplies meshes (bilinear quads Q4, quadratic triangles T6), quadrature
with per-point weights and discrete strain operators in Mandel form, sparse
symmetric assembly, and a constrained direct solver whose single
factorization is reused across arbitrarily many right-hand sides.  Unit
thickness is assumed; energies are per meter of thickness.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import GeometryError, NumericsError, UnderConstrainedError
from .phase_space import Metric

_SQRT2 = np.sqrt(2.0)

# reference-element tables -----------------------------------------------

# Q4: nodes at (-1,-1), (1,-1), (1,1), (-1,1); 2x2 Gauss.
_Q4_XI = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])
_G = 1.0 / np.sqrt(3.0)
_Q4_QP = np.array([[-_G, -_G], [_G, -_G], [_G, _G], [-_G, _G]])
_Q4_QW = np.ones(4)

# T6: corners (0,0), (1,0), (0,1); midsides 3:(0-1), 4:(1-2), 5:(2-0);
# 3-point interior rule, degree-2 exact.
_T6_QP = np.array([[1.0 / 6, 1.0 / 6], [2.0 / 3, 1.0 / 6], [1.0 / 6, 2.0 / 3]])
_T6_QW = np.full(3, 1.0 / 6)

_T6_EDGES = ((0, 1, 3), (1, 2, 4), (2, 0, 5))
_NLOC = {"Q4": 4, "T6": 6}


def _q4_shape(xi: np.ndarray):
    """Q4 shape values (npts, 4) and reference gradients (npts, 4, 2)."""
    xi = np.atleast_2d(xi)
    N = 0.25 * (1 + xi[:, None, 0] * _Q4_XI[:, 0]) * (1 + xi[:, None, 1] * _Q4_XI[:, 1])
    dN = np.empty((xi.shape[0], 4, 2))
    dN[:, :, 0] = 0.25 * _Q4_XI[:, 0] * (1 + xi[:, None, 1] * _Q4_XI[:, 1])
    dN[:, :, 1] = 0.25 * _Q4_XI[:, 1] * (1 + xi[:, None, 0] * _Q4_XI[:, 0])
    return N, dN


def _t6_shape(xi: np.ndarray):
    """T6 shape values (npts, 6) and reference gradients (npts, 6, 2)."""
    xi = np.atleast_2d(xi)
    l1 = 1.0 - xi[:, 0] - xi[:, 1]
    l2 = xi[:, 0]
    l3 = xi[:, 1]
    N = np.stack(
        [
            l1 * (2 * l1 - 1),
            l2 * (2 * l2 - 1),
            l3 * (2 * l3 - 1),
            4 * l1 * l2,
            4 * l2 * l3,
            4 * l3 * l1,
        ],
        axis=1,
    )
    dl = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])  # grad(l1), grad(l2), grad(l3)
    dN = np.empty((xi.shape[0], 6, 2))
    for j in range(2):
        dN[:, 0, j] = (4 * l1 - 1) * dl[0, j]
        dN[:, 1, j] = (4 * l2 - 1) * dl[1, j]
        dN[:, 2, j] = (4 * l3 - 1) * dl[2, j]
        dN[:, 3, j] = 4 * (l1 * dl[1, j] + l2 * dl[0, j])
        dN[:, 4, j] = 4 * (l2 * dl[2, j] + l3 * dl[1, j])
        dN[:, 5, j] = 4 * (l3 * dl[0, j] + l1 * dl[2, j])
    return N, dN


_SHAPE = {"Q4": (_q4_shape, _Q4_QP, _Q4_QW), "T6": (_t6_shape, _T6_QP, _T6_QW)}


# mesh ---------------------------------------------------------------------


@dataclass
class Mesh:
    """Nodes, homogeneous element blocks and named boundary collections.

    Parameters
    ----------
    nodes : (N, 2) array
        Node coordinates in meters.
    blocks : list of (kind, conn)
        kind is "Q4" or "T6"; conn is an (nel, nloc) int array.  Q4
        connectivity is counterclockwise; T6 lists corners then midsides
        (0-1, 1-2, 2-0).
    node_sets : dict name -> node index array
    side_sets : dict name -> (nedges, nodes_per_edge) array of boundary
        edges, ordered along the edge (end, [mid,] end).
    """

    nodes: np.ndarray
    blocks: list[tuple[str, np.ndarray]]
    node_sets: dict[str, np.ndarray] = field(default_factory=dict)
    side_sets: dict[str, np.ndarray] = field(default_factory=dict)
    provenance: dict | None = None

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=float).reshape(-1, 2)
        self.blocks = [
            (kind, np.asarray(conn, dtype=np.int64).reshape(-1, _NLOC[kind]))
            for kind, conn in self.blocks
        ]
        self.node_sets = {k: np.asarray(v, dtype=np.int64).reshape(-1) for k, v in self.node_sets.items()}
        self.side_sets = {k: np.asarray(v, dtype=np.int64) for k, v in self.side_sets.items()}

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_elements(self) -> int:
        return sum(conn.shape[0] for _, conn in self.blocks)

    @property
    def n_dof(self) -> int:
        return 2 * self.n_nodes

    def element(self, e: int) -> tuple[str, np.ndarray]:
        """(kind, connectivity) of global element index e."""
        for kind, conn in self.blocks:
            if e < conn.shape[0]:
                return kind, conn[e]
            e -= conn.shape[0]
        raise IndexError("element index out of range")

    def validate(self) -> None:
        """Structural checks: index ranges, T6 straight sides."""
        n = self.n_nodes
        for kind, conn in self.blocks:
            if conn.size and (conn.min() < 0 or conn.max() >= n):
                raise GeometryError(f"{kind} connectivity references nodes out of range")
            if kind == "T6" and conn.size:
                x = self.nodes[conn]
                for a, b, m in _T6_EDGES:
                    dev = np.linalg.norm(x[:, m] - 0.5 * (x[:, a] + x[:, b]), axis=1)
                    if dev.max() > 1e-9:
                        bad = int(dev.argmax())
                        raise GeometryError(
                            f"T6 element {bad}: midside node off the chord midpoint "
                            f"by {dev.max():.3e}"
                        )
        for name, idx in {**self.node_sets}.items():
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise GeometryError(f"node set '{name}' out of range")
        for name, edges in self.side_sets.items():
            if edges.size and (edges.min() < 0 or edges.max() >= n):
                raise GeometryError(f"side set '{name}' out of range")


def save_mesh_json(path, mesh: Mesh, provenance: dict | None = None) -> None:
    """Write a mesh as JSON (17 significant digit coordinates)."""
    from .cli_io import dump_json  # deterministic 17-digit writer

    doc = {
        "nodes": [[float(x), float(y)] for x, y in mesh.nodes],
        "elements": [{"kind": kind, "conn": conn.tolist()} for kind, conn in mesh.blocks],
        "node_sets": {k: v.tolist() for k, v in sorted(mesh.node_sets.items())},
        "side_sets": {k: v.tolist() for k, v in sorted(mesh.side_sets.items())},
    }
    prov = provenance if provenance is not None else mesh.provenance
    if prov:
        doc["provenance"] = prov
    dump_json(path, doc)


def load_mesh_json(path) -> Mesh:
    with open(path) as f:
        doc = json.load(f)
    blocks = [(el["kind"], np.array(el["conn"], dtype=np.int64)) for el in doc["elements"]]
    mesh = Mesh(
        nodes=np.array(doc["nodes"], dtype=float),
        blocks=blocks,
        node_sets={k: np.array(v, dtype=np.int64) for k, v in doc.get("node_sets", {}).items()},
        side_sets={k: np.array(v, dtype=np.int64) for k, v in doc.get("side_sets", {}).items()},
        provenance=doc.get("provenance"),
    )
    mesh.validate()
    return mesh


# quadrature ----------------------------------------------------------------


@dataclass(frozen=True)
class QuadraturePoint:
    """Per-point view: element index, weight (area measure), strain operator.

    `B` maps the element's interleaved local displacements (ux1, uy1, ...)
    to the Mandel strain vector.
    """

    element: int
    w: float
    B: np.ndarray
    location: np.ndarray
    dofs: np.ndarray


class Quadrature:
    """All quadrature points of a mesh, plus the assembled strain operator.

    `strain_op` is the sparse (3M, ndof) matrix stacking every point's B
    row-block, so `strain_op @ u` gives all strains and
    `strain_op.T @ (w-scaled stresses)` the internal force vector.
    Indexable as a sequence of :class:`QuadraturePoint`.
    """

    def __init__(self, mesh: Mesh):
        mesh.validate()
        ws, xys, elems = [], [], []
        B_blocks, dof_blocks = [], []
        e_offset = 0
        for kind, conn in mesh.blocks:
            shape_fn, qp, qw = _SHAPE[kind]
            nel, nloc = conn.shape
            if nel == 0:
                continue
            N, dN = shape_fn(qp)  # (npk, nloc), (npk, nloc, 2)
            coords = mesh.nodes[conn]  # (nel, nloc, 2)
            # J[e,q,i,j] = d x_i / d xi_j
            J = np.einsum("eli,qlj->eqij", coords, dN)
            detJ = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
            if np.any(detJ <= 0):
                e_bad, _ = np.argwhere(detJ <= 0)[0]
                raise GeometryError(
                    f"non-positive Jacobian in {kind} element {e_offset + int(e_bad)}"
                )
            Jinv = np.empty_like(J)
            Jinv[..., 0, 0] = J[..., 1, 1] / detJ
            Jinv[..., 1, 1] = J[..., 0, 0] / detJ
            Jinv[..., 0, 1] = -J[..., 0, 1] / detJ
            Jinv[..., 1, 0] = -J[..., 1, 0] / detJ
            # dN_xy[e,q,l,j] = dN_l/dx_j
            dNxy = np.einsum("qlk,eqkj->eqlj", dN, Jinv)
            npk = qp.shape[0]
            B = np.zeros((nel, npk, 3, 2 * nloc))
            B[..., 0, 0::2] = dNxy[..., 0]
            B[..., 1, 1::2] = dNxy[..., 1]
            B[..., 2, 0::2] = dNxy[..., 1] / _SQRT2
            B[..., 2, 1::2] = dNxy[..., 0] / _SQRT2
            dofs = np.empty((nel, 2 * nloc), dtype=np.int64)
            dofs[:, 0::2] = 2 * conn
            dofs[:, 1::2] = 2 * conn + 1
            w = detJ * qw[None, :]
            xy = np.einsum("ql,eli->eqi", N, coords)
            ws.append(w.reshape(-1))
            xys.append(xy.reshape(-1, 2))
            elems.append(np.repeat(np.arange(nel) + e_offset, npk))
            B_blocks.append(B)
            dof_blocks.append(dofs)
            e_offset += nel
        self.mesh = mesh
        self.w = np.concatenate(ws)
        self.xy = np.concatenate(xys)
        self.elem = np.concatenate(elems)
        self.n_points = self.w.shape[0]
        self._B_blocks = B_blocks
        self._dof_blocks = dof_blocks
        self.strain_op = self._build_strain_op(mesh.n_dof)

    def _build_strain_op(self, ndof: int) -> sp.csr_matrix:
        rows, cols, vals = [], [], []
        p0 = 0
        for B, dofs in zip(self._B_blocks, self._dof_blocks):
            nel, npk, _, n2 = B.shape
            npts = nel * npk
            r = (3 * (p0 + np.arange(npts))).reshape(nel, npk, 1, 1) + np.arange(3).reshape(1, 1, 3, 1)
            c = np.broadcast_to(dofs[:, None, None, :], (nel, npk, 3, n2))
            rows.append(np.broadcast_to(r, B.shape).ravel())
            cols.append(c.ravel())
            vals.append(B.ravel())
            p0 += npts
        op = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(3 * self.n_points, ndof),
        )
        return op.tocsr()

    # sequence protocol over per-point views
    def __len__(self) -> int:
        return self.n_points

    def __getitem__(self, i: int) -> QuadraturePoint:
        if not (0 <= i < self.n_points):
            raise IndexError(i)
        p = i
        for B, dofs in zip(self._B_blocks, self._dof_blocks):
            nel, npk = B.shape[:2]
            if p < nel * npk:
                e, q = divmod(p, npk)
                return QuadraturePoint(
                    element=int(self.elem[i]),
                    w=float(self.w[i]),
                    B=B[e, q],
                    location=self.xy[i],
                    dofs=dofs[e],
                )
            p -= nel * npk
        raise IndexError(i)

    def __iter__(self):
        return (self[i] for i in range(self.n_points))

    def strains(self, u: np.ndarray) -> np.ndarray:
        """Mandel strains at every point from a nodal displacement vector."""
        return (self.strain_op @ u).reshape(self.n_points, 3)

    def element_average(self, values: np.ndarray) -> np.ndarray:
        """Area-weighted per-element average of a per-point field."""
        values = np.asarray(values, dtype=float)
        nel = self.mesh.n_elements
        wsum = np.bincount(self.elem, weights=self.w, minlength=nel)
        if values.ndim == 1:
            tot = np.bincount(self.elem, weights=self.w * values, minlength=nel)
            return tot / wsum
        out = np.empty((nel, values.shape[1]))
        for j in range(values.shape[1]):
            out[:, j] = np.bincount(self.elem, weights=self.w * values[:, j], minlength=nel) / wsum
        return out


def build_quadrature(mesh: Mesh) -> Quadrature:
    """Quadrature points (2x2 Gauss on Q4, 3-point rule on T6) with Mandel
    strain operators.  Raises GeometryError on a non-positive Jacobian."""
    return Quadrature(mesh)


def internal_forces(quad: Quadrature, stresses: np.ndarray) -> np.ndarray:
    """Nodal force vector ``sum_e w_e B_e^T s_e`` of a per-point stress field."""
    stresses = np.asarray(stresses, dtype=float)
    if stresses.shape != (quad.n_points, 3):
        raise ValueError(
            f"expected {(quad.n_points, 3)} stresses, got {stresses.shape}"
        )
    return quad.strain_op.T @ (quad.w[:, None] * stresses).ravel()


# boundary conditions and the factorized operator ----------------------------


@dataclass
class BoundaryConditions:
    """Prescribed displacement DOFs and the applied nodal force vector.

    `dirichlet` maps DOF index (2*node + component) to the prescribed value
    in meters; `forces` is dense over all DOFs (newtons), zero where
    unspecified, and must be zero at Dirichlet DOFs.
    """

    dirichlet: dict[int, float]
    forces: np.ndarray | None = None

    def resolved_forces(self, ndof: int) -> np.ndarray:
        f = np.zeros(ndof) if self.forces is None else np.asarray(self.forces, dtype=float)
        if f.shape != (ndof,):
            raise ValueError(f"force vector has length {f.shape}, expected ({ndof},)")
        return f

    def validate(self, ndof: int) -> None:
        for dof in self.dirichlet:
            if not (0 <= dof < ndof):
                raise ValueError(f"Dirichlet DOF {dof} out of range (ndof={ndof})")
        f = self.resolved_forces(ndof)
        fixed = np.fromiter(self.dirichlet.keys(), dtype=np.int64, count=len(self.dirichlet))
        if fixed.size and np.any(f[fixed] != 0.0):
            bad = fixed[np.nonzero(f[fixed])[0][0]]
            raise ValueError(f"DOF {bad} is both force-loaded and Dirichlet-prescribed")


@dataclass
class DiscreteModel:
    """Mesh + quadrature + boundary conditions of one mechanical problem."""

    mesh: Mesh
    quad: Quadrature
    bcs: BoundaryConditions

    @property
    def n_dof(self) -> int:
        return self.mesh.n_dof


def build_model(mesh: Mesh, bcs: BoundaryConditions) -> DiscreteModel:
    quad = build_quadrature(mesh)
    bcs.validate(mesh.n_dof)
    return DiscreteModel(mesh=mesh, quad=quad, bcs=bcs)


class FactorizedOperator:
    """Direct factorization of ``sum_e w_e B_e^T C B_e`` on the free DOFs.

    Dirichlet DOFs are eliminated; the single factorization solves with
    either physical or homogeneous Dirichlet data, for any number of
    right-hand sides.
    """

    def __init__(self, K: sp.csr_matrix, fixed_dofs: np.ndarray):
        ndof = K.shape[0]
        fixed = np.unique(np.asarray(fixed_dofs, dtype=np.int64))
        if fixed.size < 3:
            raise UnderConstrainedError(
                f"only {fixed.size} constrained DOFs; 2D rigid modes need at least 3"
            )
        free = np.setdiff1d(np.arange(ndof), fixed, assume_unique=True)
        self.n_dof = ndof
        self.fixed = fixed
        self.free = free
        self.K = K
        self.K_ff = K[free][:, free].tocsc()
        self.K_fc = K[free][:, fixed].tocsr()
        try:
            self._lu = splu(
                self.K_ff,
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=0.0,
                options=dict(SymmetricMode=True),
            )
        except RuntimeError as exc:
            raise UnderConstrainedError(f"singular operator: {exc}") from exc
        piv = self._lu.U.diagonal()
        if piv.min() <= 0 or piv.min() < 1e-12 * piv.max():
            raise UnderConstrainedError(
                "operator not positive definite after constraint elimination "
                f"(pivot ratio {piv.min() / piv.max():.3e})"
            )

    def solve_free(self, rhs_free: np.ndarray) -> np.ndarray:
        """Solve on free DOFs only; accepts (nfree,) or (nfree, k)."""
        return self._lu.solve(rhs_free)

    def solve(self, rhs: np.ndarray, dirichlet_values: dict[int, float] | None = None) -> np.ndarray:
        """Full-vector solve: prescribed values at fixed DOFs, equilibrium at
        free DOFs.  `dirichlet_values` keys must be constrained DOFs; missing
        constrained DOFs get 0."""
        rhs = np.asarray(rhs, dtype=float)
        if rhs.shape != (self.n_dof,):
            raise ValueError(f"rhs has shape {rhs.shape}, expected ({self.n_dof},)")
        u = np.zeros(self.n_dof)
        if dirichlet_values:
            pos = {int(d): i for i, d in enumerate(self.fixed)}
            for dof, val in dirichlet_values.items():
                if int(dof) not in pos:
                    raise ValueError(f"DOF {dof} is not a constrained DOF of this operator")
                u[int(dof)] = float(val)
        uc = u[self.fixed]
        rhs_f = rhs[self.free] - self.K_fc @ uc
        u[self.free] = self._lu.solve(rhs_f)
        return u


def assemble_operator(quad: Quadrature, metric: Metric, bcs: BoundaryConditions) -> FactorizedOperator:
    """Assemble and factorize the metric pseudo-stiffness with `bcs` constraints."""
    M = quad.n_points
    data = np.broadcast_to(metric.C, (M, 3, 3)) * quad.w[:, None, None]
    blk = sp.bsr_matrix(
        (np.ascontiguousarray(data), np.arange(M), np.arange(M + 1)),
        shape=(3 * M, 3 * M),
    )
    K = (quad.strain_op.T @ (blk @ quad.strain_op)).tocsr()
    K = 0.5 * (K + K.T)
    bcs.validate(quad.mesh.n_dof)
    fixed = np.fromiter(bcs.dirichlet.keys(), dtype=np.int64, count=len(bcs.dirichlet))
    return FactorizedOperator(K.tocsr(), fixed)


def solve_displacement(
    op: FactorizedOperator, rhs: np.ndarray, dirichlet_values: dict[int, float] | None = None
) -> np.ndarray:
    """Constrained solve; see :meth:`FactorizedOperator.solve`."""
    return op.solve(rhs, dirichlet_values)


# reference FEM ---------------------------------------------------------------


@dataclass
class FemSolution:
    """Classical FEM solution: displacements, per-point states, total energy."""

    u: np.ndarray
    eps: np.ndarray
    sig: np.ndarray
    energy: float

    def states(self) -> np.ndarray:
        """(M, 6) Mandel state rows (eps, sig)."""
        return np.hstack([self.eps, self.sig])


def _as_metric(law) -> Metric:
    if isinstance(law, Metric):
        return law
    if hasattr(law, "to_metric"):
        return law.to_metric()
    return Metric(np.asarray(law, dtype=float))


def fem_reference_solve(model: DiscreteModel, law) -> FemSolution:
    """Linear-elastic reference solution on `model` with constitutive `law`.

    `law` may be a Metric, a 3x3 Mandel stiffness, or any object with
    `to_metric()`.  Strains come from the strain operator, stresses from
    the law, energy is ``0.5 * sum_e w_e s_e . e_e``.
    """
    metric = _as_metric(law)
    op = assemble_operator(model.quad, metric, model.bcs)
    f = model.bcs.resolved_forces(model.n_dof)
    u = op.solve(f, model.bcs.dirichlet)
    eps = model.quad.strains(u)
    sig = eps @ metric.C
    energy = 0.5 * float(np.sum(model.quad.w * np.einsum("ij,ij->i", sig, eps)))
    return FemSolution(u=u, eps=eps, sig=sig, energy=energy)


def reaction_forces(quad: Quadrature, stresses: np.ndarray, applied: np.ndarray, fixed: np.ndarray) -> np.ndarray:
    """Total force vector with reactions recovered at constrained DOFs."""
    f = applied.copy()
    internal = internal_forces(quad, stresses)
    f[fixed] = internal[fixed]
    return f


# VTK output ------------------------------------------------------------------

_VTK_CELL_TYPE = {"Q4": 9, "T6": 22}


def write_vtk(
    path,
    mesh: Mesh,
    point_data: dict[str, np.ndarray] | None = None,
    cell_data: dict[str, np.ndarray] | None = None,
    title: str = "ddmech fields",
) -> None:
    """Legacy ASCII VTK unstructured grid with point vectors and per-element
    cell scalars.  Vector fields are (N, 2); scalars (N,) or (nel,)."""

    def fmt(x):
        return f"{x:.17g}"

    with open(path, "w", newline="\n") as f:
        f.write("# vtk DataFile Version 4.2\n")
        f.write(title[:255] + "\n")
        f.write("ASCII\nDATASET UNSTRUCTURED_GRID\n")
        f.write(f"POINTS {mesh.n_nodes} double\n")
        for x, y in mesh.nodes:
            f.write(f"{fmt(x)} {fmt(y)} 0\n")
        nel = mesh.n_elements
        size = sum((conn.shape[1] + 1) * conn.shape[0] for _, conn in mesh.blocks)
        f.write(f"CELLS {nel} {size}\n")
        for _, conn in mesh.blocks:
            for row in conn:
                f.write(str(conn.shape[1]) + " " + " ".join(map(str, row)) + "\n")
        f.write(f"CELL_TYPES {nel}\n")
        for kind, conn in mesh.blocks:
            f.write((str(_VTK_CELL_TYPE[kind]) + "\n") * conn.shape[0])
        if point_data:
            f.write(f"POINT_DATA {mesh.n_nodes}\n")
            for name, arr in point_data.items():
                arr = np.asarray(arr, dtype=float)
                if arr.ndim == 2:
                    f.write(f"VECTORS {name} double\n")
                    for row in arr:
                        f.write(f"{fmt(row[0])} {fmt(row[1])} 0\n")
                else:
                    f.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                    for v in arr:
                        f.write(fmt(v) + "\n")
        if cell_data:
            f.write(f"CELL_DATA {nel}\n")
            for name, arr in cell_data.items():
                arr = np.asarray(arr, dtype=float)
                f.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                for v in arr:
                    f.write(fmt(v) + "\n")
