"""Predictable reflected BSDEs and nonlinear optimal stopping on finite filtration trees."""

from .bsde import BsdeSolution, g_expectation, solve_bsde, step_solve
from .drivers import Driver, make_driver
from .errors import PrestoError
from .filtration import FiltrationTree, build_lattice, build_random_tree, validate_tree
from .oracle import EnumerationBudget, brute_force_value, count_stopping_times, enumerate_stopping_times
from .process import ExtendedStoppingTime, LadlagPredictableProcess, regularity_report, validate_stopping_time
from .rbsde import RbsdeSolution, solve_rbsde, solve_rbsde_picard, verify_rbsde
from .snell import bellman_check, mertens_decompose, snell_envelope
from .stopping import (
    is_martingale_interval,
    optimality_report,
    tau_alpha,
    tau_tilde,
    theta_alpha,
    value_function,
)

__all__ = [
    "BsdeSolution", "Driver", "EnumerationBudget", "ExtendedStoppingTime", "FiltrationTree",
    "LadlagPredictableProcess", "PrestoError", "RbsdeSolution", "bellman_check", "brute_force_value",
    "build_lattice", "build_random_tree", "count_stopping_times", "enumerate_stopping_times", "g_expectation",
    "is_martingale_interval", "make_driver", "mertens_decompose", "optimality_report", "regularity_report",
    "snell_envelope", "solve_bsde", "solve_rbsde", "solve_rbsde_picard", "step_solve", "tau_alpha", "tau_tilde",
    "theta_alpha", "validate_stopping_time", "validate_tree", "value_function", "verify_rbsde",
]
