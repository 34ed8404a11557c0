"""Impulse-control QVI solvers: regression Monte Carlo on reflected BSDEs
with a finite-difference reference solver."""

__version__ = "0.1.0"

from .expr import ExpressionError, parse, to_string
from .fdoracle import FdError, FdGrid, FDSolver, fd_reference, fd_solve_local_qvi, fd_solve_nonlocal_qvi, transform_lambda
from .fixedpoint import (
    ConvergenceReport,
    DivergenceError,
    LSMCSolver,
    NormWarning,
    SolverConfig,
    solve_local,
    solve_nonlocal,
    weighted_norm,
)
from .impulse import NeverRule, ThresholdRule, ValueFunction, intervention_op, optimal_strategy
from .model import ConfigError, ProblemSpec, load_spec, validate_spec
from .rbsde import CompatibilityError, evaluate_impulse_value, solve_bsde, solve_reflected
from .regression import LeastSquaresRegressor, RegressionWarning
from .sde import SimulationError, TimeGrid, simulate_controlled, simulate_dominating, simulate_paths

__all__ = [
    "__version__",
    "ExpressionError",
    "parse",
    "to_string",
    "FdError",
    "FdGrid",
    "FDSolver",
    "fd_reference",
    "fd_solve_local_qvi",
    "fd_solve_nonlocal_qvi",
    "transform_lambda",
    "ConvergenceReport",
    "DivergenceError",
    "LSMCSolver",
    "NormWarning",
    "SolverConfig",
    "solve_local",
    "solve_nonlocal",
    "weighted_norm",
    "NeverRule",
    "ThresholdRule",
    "ValueFunction",
    "intervention_op",
    "optimal_strategy",
    "ConfigError",
    "ProblemSpec",
    "load_spec",
    "validate_spec",
    "CompatibilityError",
    "evaluate_impulse_value",
    "solve_bsde",
    "solve_reflected",
    "LeastSquaresRegressor",
    "RegressionWarning",
    "SimulationError",
    "TimeGrid",
    "simulate_controlled",
    "simulate_dominating",
    "simulate_paths",
]
