"""Finite volume solver and Monte Carlo convergence harness for the
stochastic heat equation with multiplicative scalar noise and homogeneous
Neumann boundary conditions."""

from fvshe.mesh import Mesh, MeshRegularity, RectGrid, build_rect_mesh, mesh_regularity, validate_mesh
from fvshe.field import (
    Field,
    ScalarFunction2D,
    cell_average_project,
    centered_project,
    cross_mesh_l2_error,
    discrete_h1_seminorm,
    discrete_l2_norm,
    mean_value,
)
from fvshe.operators import (
    SolverConfig,
    SolverError,
    SparseOperator,
    apply,
    assemble_stiffness,
    elliptic_project,
    solve_spd,
)
from fvshe.sde import (
    BrownianIncrements,
    NoiseModel,
    aggregate_increments,
    fvs_step,
    sample_increments,
    simulate,
)

__version__ = "0.1.0"

__all__ = [
    "BrownianIncrements",
    "Field",
    "Mesh",
    "MeshRegularity",
    "NoiseModel",
    "RectGrid",
    "ScalarFunction2D",
    "SolverConfig",
    "SolverError",
    "SparseOperator",
    "aggregate_increments",
    "apply",
    "assemble_stiffness",
    "build_rect_mesh",
    "cell_average_project",
    "centered_project",
    "cross_mesh_l2_error",
    "discrete_h1_seminorm",
    "discrete_l2_norm",
    "elliptic_project",
    "fvs_step",
    "mean_value",
    "mesh_regularity",
    "sample_increments",
    "simulate",
    "solve_spd",
    "validate_mesh",
]
