"""Quasistationary distributions of killed diffusions on boxes.

Finite-difference principal eigenpairs of the generator and its formal
adjoint, the log-transformed ergodic control problems they solve, and
Monte Carlo machinery that checks every identity from the exit-time side.
"""

__version__ = "0.1.0"

from .coefficients import (
    CoefficientModel,
    DensityWeight,
    make_model,
    make_weight,
)
from .eigen import QSDSolution, solve_qsd
from .geometry import BoxDomain, Grid, build_grid
from .simulate import SimConfig, build_control_field, run_ensemble

__all__ = [
    "BoxDomain",
    "CoefficientModel",
    "DensityWeight",
    "Grid",
    "QSDSolution",
    "SimConfig",
    "__version__",
    "build_control_field",
    "build_grid",
    "make_model",
    "make_weight",
    "run_ensemble",
    "solve_qsd",
]
