"""Adaptive mixed finite elements for clusters of Laplace eigenvalues in 2D."""
from .adapt import AfemConfig, AfemHistory, dorfler_mark, read_history, run_afem
from .assembly import MixedSystem, assemble, discrete_gradient, l2_project
from .eigsolve import ClusterSpec, EigenCluster, EigenSolverError, solve_cluster, solve_source
from .estimator import IndicatorField, estimate
from .fespace import FeDegree, build_dofmap
from .mesh import Mesh, MeshError, load_initial_mesh, lshape, refine, uniform_refine, unit_square

__version__ = "0.1.0"

__all__ = [
    "AfemConfig",
    "AfemHistory",
    "ClusterSpec",
    "EigenCluster",
    "EigenSolverError",
    "FeDegree",
    "IndicatorField",
    "Mesh",
    "MeshError",
    "MixedSystem",
    "assemble",
    "build_dofmap",
    "discrete_gradient",
    "dorfler_mark",
    "estimate",
    "l2_project",
    "load_initial_mesh",
    "lshape",
    "read_history",
    "refine",
    "run_afem",
    "solve_cluster",
    "solve_source",
    "uniform_refine",
    "unit_square",
]
