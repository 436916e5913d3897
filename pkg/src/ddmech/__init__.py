"""Model-free data-driven 2D solid mechanics.

Two complementary tools built on a shared plane-strain finite-element
kernel:

* a distance-minimizing solver that computes compatible, equilibrated
  strain/stress fields directly against a material database (a point
  cloud of strain-stress pairs), without a constitutive model, and
* an identification procedure that builds such a database from
  displacement-field snapshots and the applied forces of (virtual)
  experiments.

Synthetic data generators, file codecs and a command-line front end
round out the package.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DDMechError,
    GeometryError,
    NumericsError,
    UnderConstrainedError,
    UnsupportedMetricError,
)
from .phase_space import (
    LocalState,
    MaterialDatabase,
    Metric,
    build_index,
    global_distance,
    load_database_csv,
    local_norm,
    nearest_state,
    optimal_rotation_2d,
    save_database_csv,
)
from .fe_core import (
    BoundaryConditions,
    DiscreteModel,
    FactorizedOperator,
    FemSolution,
    Mesh,
    assemble_operator,
    build_model,
    build_quadrature,
    fem_reference_solve,
    internal_forces,
    load_mesh_json,
    save_mesh_json,
    solve_displacement,
)
from .datagen import (
    LinearElasticLaw,
    LoadHistory,
    StrainGridSpec,
    gen_mesh,
    gen_regular_db,
    hooke_stress,
    run_virtual_experiment,
)
from .ddcm import (
    DDCMProblem,
    DDCMSolution,
    ddcm_solve,
    project_to_data,
    project_to_equilibrium,
    solution_metrics,
)
from .ddi import (
    DDIProblem,
    DDIResult,
    Snapshot,
    ddi_solve,
    kmeans_init,
    solve_stationarity,
    update_centroids,
    update_mapping,
    update_stresses,
)
