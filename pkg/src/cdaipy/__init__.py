"""cdaipy: steady 2D Navier-Stokes solvers with continuous data assimilation.

Picard, IPY (incremental Picard-Yosida), their nudged variants, Newton and a
nudged-IPY -> Newton hybrid, on Taylor-Hood or Scott-Vogelius elements.
"""
from .mesh import Mesh, build_unit_square, build_channel_with_block, build_coarse_overlay, admissible_H
from .fespace import MixedSpace, TAYLOR_HOOD, SCOTT_VOGELIUS
from .problems import ProblemSpec, Discretization, discretize
from .solvers import SolverConfig, run_solver, hybrid_drive, contraction_rate, geometric_bound
from .data import PartialData, extract_partial_data, add_noise, svd_compress, svd_reconstruct

__all__ = [
    "Mesh", "build_unit_square", "build_channel_with_block", "build_coarse_overlay", "admissible_H",
    "MixedSpace", "TAYLOR_HOOD", "SCOTT_VOGELIUS", "ProblemSpec", "Discretization", "discretize",
    "SolverConfig", "run_solver", "hybrid_drive", "contraction_rate", "geometric_bound",
    "PartialData", "extract_partial_data", "add_noise", "svd_compress", "svd_reconstruct",
]
__version__ = "0.1.0"
