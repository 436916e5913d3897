"""Distance-minimizing solver against a material database.

Alternates two projections until the point-to-database association stops
changing: nearest database state per quadrature point (standard or
rotation-minimized distance), then the closest compatible and equilibrated
state, obtained from two linear solves against one shared factorization
(a displacement system driven by the mapped strains with the physical
Dirichlet data, and a multiplier system driven by the stress imbalance
with homogeneous Dirichlet data).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericsError
from .fe_core import (
    DiscreteModel,
    FactorizedOperator,
    FemSolution,
    assemble_operator,
    internal_forces,
)
from .phase_space import MaterialDatabase, Metric, rotate_states


@dataclass
class DDCMOptions:
    max_iterations: int = 10_000
    variant: str = "standard"  # "standard" | "isotropic"
    init: str | np.ndarray = "zero"  # "zero" | "random-db", or an (M, 6) state array
    seed: int = 0
    iso_k0: int = 32
    iso_verify_every: int = 0
    # stagnation window for limit-cycle detection
    cycle_window: int = 10
    cycle_rtol: float = 1e-14


@dataclass
class DDCMProblem:
    model: DiscreteModel
    metric: Metric
    database: MaterialDatabase
    options: DDCMOptions = field(default_factory=DDCMOptions)

    def __post_init__(self):
        if self.options.variant not in ("standard", "isotropic"):
            raise ValueError(f"unknown variant {self.options.variant!r}")
        # queries must run in this problem's metric
        if not np.allclose(self.database.metric.C, self.metric.C, rtol=1e-12, atol=0.0):
            self.database = self.database.reindexed(self.metric)


@dataclass
class DataProjection:
    """Nearest-database association of a mechanical state set."""

    mapping: np.ndarray  # (M,) database indices
    mapped: np.ndarray  # (M, 6) associated material states (rotated for isotropic)
    d2: np.ndarray  # (M,) squared local distances
    theta: np.ndarray | None = None  # rotation angles (isotropic variant)

    def weighted_total(self, w: np.ndarray) -> float:
        return float(np.sum(w * self.d2))


@dataclass
class DDCMSolution:
    """Converged (or best-iterate) solver state and diagnostics."""

    u: np.ndarray
    lam: np.ndarray
    z: np.ndarray  # (M, 6) mechanical states
    mapping: np.ndarray
    mapped: np.ndarray
    history: list[float]  # squared global distance per iteration (J)
    converged: bool
    iterations: int
    status: str  # "converged" | "max_iterations" | "cycling"
    equilibrium_residuals: list[float]
    mapping_changes: list[int]
    theta: np.ndarray | None = None

    @property
    def eps(self) -> np.ndarray:
        return self.z[:, :3]

    @property
    def sig(self) -> np.ndarray:
        return self.z[:, 3:]

    @property
    def distance2(self) -> float:
        return self.history[-1]


def project_to_data(
    z: np.ndarray,
    db: MaterialDatabase,
    variant: str = "standard",
    iso_k0: int = 32,
    iso_verify_every: int = 0,
) -> DataProjection:
    """Per-point nearest database state under the chosen distance."""
    z = np.asarray(z, dtype=float).reshape(-1, 6)
    if variant == "standard":
        idx, d2 = db.query(z)
        return DataProjection(mapping=idx, mapped=db.states_mandel[idx].copy(), d2=d2)
    if variant == "isotropic":
        idx, theta, d2 = db.query_isotropic(z, k0=iso_k0, verify_every=iso_verify_every)
        mapped = rotate_states(db.states_mandel[idx], theta)
        return DataProjection(mapping=idx, mapped=mapped, d2=d2, theta=theta)
    raise ValueError(f"unknown variant {variant!r}")


def project_to_equilibrium(
    mapped: np.ndarray, problem: DDCMProblem, op: FactorizedOperator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Closest compatible/equilibrated state to the mapped material states.

    Solves the displacement system (physical Dirichlet values, eigen-strain
    load from the mapped strains) and the multiplier system (homogeneous
    Dirichlet, load = applied forces minus mapped-stress internal forces),
    then rebuilds the mechanical state from both.
    """
    quad = problem.model.quad
    C = problem.metric.C
    mapped = np.asarray(mapped, dtype=float).reshape(quad.n_points, 6)
    eps_star, sig_star = mapped[:, :3], mapped[:, 3:]
    bcs = problem.model.bcs
    f = bcs.resolved_forces(problem.model.n_dof)

    rhs_u = quad.strain_op.T @ (quad.w[:, None] * (eps_star @ C)).ravel()
    u = op.solve(rhs_u, bcs.dirichlet)
    rhs_l = f - internal_forces(quad, sig_star)
    lam = op.solve(rhs_l)

    eps = quad.strains(u)
    sig = sig_star + quad.strains(lam) @ C
    return u, lam, np.hstack([eps, sig])


def equilibrium_residual(model: DiscreteModel, sig: np.ndarray, free: np.ndarray) -> float:
    """Relative free-DOF force balance of a stress field.

    Scaled by the larger of the applied-force norm and the internal-force
    norm (displacement-driven problems have zero applied forces on free
    DOFs but order-one reactions).
    """
    f = model.bcs.resolved_forces(model.n_dof)
    internal = internal_forces(model.quad, sig)
    num = np.linalg.norm((internal - f)[free])
    scale = max(np.linalg.norm(f[free]), np.linalg.norm(internal), 1e-300)
    return float(num / scale)


def power_identity_residual(model: DiscreteModel, u: np.ndarray, z: np.ndarray) -> float:
    """Relative mismatch of ``f . u = sum_e w_e s_e . e_e``.

    Reactions at Dirichlet DOFs are recovered from the internal forces.
    """
    quad = model.quad
    z = np.asarray(z).reshape(quad.n_points, 6)
    f = model.bcs.resolved_forces(model.n_dof).copy()
    internal = internal_forces(quad, z[:, 3:])
    fixed = np.fromiter(model.bcs.dirichlet.keys(), dtype=np.int64, count=len(model.bcs.dirichlet))
    f[fixed] = internal[fixed]
    power = float(f @ u)
    work = float(np.sum(quad.w * np.einsum("ij,ij->i", z[:, 3:], z[:, :3])))
    return abs(power - work) / max(abs(power), abs(work), 1e-300)


def _initial_state(problem: DDCMProblem) -> np.ndarray:
    opt = problem.options
    M = problem.model.quad.n_points
    if isinstance(opt.init, np.ndarray):
        z0 = np.asarray(opt.init, dtype=float)
        if z0.shape != (M, 6):
            raise ValueError(f"init state must have shape {(M, 6)}")
        return z0
    if opt.init == "zero":
        return np.zeros((M, 6))
    if opt.init == "random-db":
        rng = np.random.default_rng(opt.seed)
        idx = rng.integers(0, len(problem.database), size=M)
        return problem.database.states_mandel[idx].copy()
    raise ValueError(f"unknown init mode {opt.init!r}")


def ddcm_solve(problem: DDCMProblem, op: FactorizedOperator | None = None) -> DDCMSolution:
    """Fixed-point iteration: data projection, then equilibrium projection.

    Terminates when the data association repeats (converged), when the
    squared-distance history stagnates under an oscillating mapping
    (cycling), or at the iteration cap.  The recorded history starts after
    the first equilibrium projection and is non-increasing.
    """
    opt = problem.options
    quad = problem.model.quad
    if op is None:
        op = assemble_operator(quad, problem.metric, problem.model.bcs)

    def project(zs):
        return project_to_data(
            zs, problem.database, opt.variant, iso_k0=opt.iso_k0,
            iso_verify_every=opt.iso_verify_every,
        )

    proj = project(_initial_state(problem))
    mapping_prev = proj.mapping
    u, lam, z = project_to_equilibrium(proj.mapped, problem, op)

    history: list[float] = []
    equil: list[float] = []
    changes: list[int] = []
    status = "max_iterations"
    converged = False
    theta = proj.theta
    mapped = proj.mapped
    it = 0
    for it in range(1, opt.max_iterations + 1):
        proj = project(z)
        history.append(proj.weighted_total(quad.w))
        equil.append(equilibrium_residual(problem.model, z[:, 3:], op.free))
        changed = int(np.count_nonzero(proj.mapping != mapping_prev))
        changes.append(changed)
        if changed == 0:
            status = "converged"
            converged = True
            mapped, theta = proj.mapped, proj.theta
            break
        w10 = opt.cycle_window
        if len(history) > w10 and abs(history[-1 - w10] - history[-1]) <= opt.cycle_rtol * max(
            abs(history[-1]), 1.0
        ):
            status = "cycling"
            mapped, theta = proj.mapped, proj.theta
            mapping_prev = proj.mapping
            break
        mapping_prev = proj.mapping
        mapped, theta = proj.mapped, proj.theta
        u, lam, z = project_to_equilibrium(proj.mapped, problem, op)

    return DDCMSolution(
        u=u,
        lam=lam,
        z=z,
        mapping=mapping_prev,
        mapped=mapped,
        history=history,
        converged=converged,
        iterations=it,
        status=status,
        equilibrium_residuals=equil,
        mapping_changes=changes,
        theta=theta,
    )


@dataclass
class MetricsReport:
    """Squared global distances (J) between solutions and the database."""

    fem_db: float
    ddcm_db: float
    ddcm_fem: float
    energy_fem: float
    energy_ddcm: float
    iterations: int
    converged: bool
    pointwise_abs: np.ndarray
    pointwise_rel: np.ndarray
    provenance: dict = field(default_factory=dict)

    def scalars(self) -> dict:
        return {
            "fem_db": self.fem_db,
            "ddcm_db": self.ddcm_db,
            "ddcm_fem": self.ddcm_fem,
            "energy_fem": self.energy_fem,
            "energy_ddcm": self.energy_ddcm,
            "iterations": self.iterations,
            "converged": self.converged,
        }


def solution_metrics(
    sol: DDCMSolution,
    ref: FemSolution,
    db: MaterialDatabase,
    metric: Metric,
    weights: np.ndarray,
) -> MetricsReport:
    """Distance diagnostics between a solver solution, a reference FEM
    solution and the database (all squared, energy units).

    The pointwise relative field divides the squared local distance by the
    reference local energy density ``e . s``.
    """
    w = np.asarray(weights, dtype=float).reshape(-1)
    ref_states = ref.states()
    if sol.z.shape[0] != ref_states.shape[0] or w.shape[0] != sol.z.shape[0]:
        raise ValueError("solution, reference and weights use different discretizations")
    if not np.allclose(db.metric.C, metric.C, rtol=1e-12, atol=0.0):
        db = db.reindexed(metric)
    _, d2_fem = db.query(ref_states)
    fem_db = float(np.sum(w * d2_fem))
    ddcm_db = float(np.sum(w * _pair_d2(sol.z, sol.mapped, metric)))
    d2_pair = _pair_d2(sol.z, ref_states, metric)
    ddcm_fem = float(np.sum(w * d2_pair))
    density = np.einsum("ij,ij->i", ref.eps, ref.sig)
    floor = 1e-12 * max(float(np.abs(density).max()), 1e-300)
    rel = d2_pair / np.maximum(density, floor)
    energy_ddcm = 0.5 * float(np.sum(w * np.einsum("ij,ij->i", sol.sig, sol.eps)))
    return MetricsReport(
        fem_db=fem_db,
        ddcm_db=ddcm_db,
        ddcm_fem=ddcm_fem,
        energy_fem=ref.energy,
        energy_ddcm=energy_ddcm,
        iterations=sol.iterations,
        converged=sol.converged,
        pointwise_abs=np.sqrt(d2_pair),
        pointwise_rel=rel,
    )


def _pair_d2(za: np.ndarray, zb: np.ndarray, metric: Metric) -> np.ndarray:
    d = metric.embed_states(za) - metric.embed_states(zb)
    return np.einsum("ij,ij->i", d, d)
