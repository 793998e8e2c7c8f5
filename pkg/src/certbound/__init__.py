"""Certified upper and lower bounds on expectations of polynomial ODE states.

Given an ODE dx/dt = f(t, x) with polynomial right-hand side and partial
knowledge of the initial distribution (bounds or equalities on a few moments),
``certbound`` computes guaranteed bounds on E[g(x(T))] by solving a
sum-of-squares program with a small built-in interior-point SDP solver.
"""

from .bounds import (
    BoundResult,
    Direction,
    Kind,
    MomentConstraint,
    UncertaintyProblem,
    bound_interval,
    build_bound_program,
    compute_bound,
    degree_sweep,
    moment_constraints_from_mean_cov,
)
from .dynamics import VectorField, integrate, lie_derivative, transport_residual
from .montecarlo import InitialDistribution, consistency_check, estimate_expectation, sample_initial
from .polynomial import Polynomial, VariableSpace, parse_expression, render

__version__ = "0.1.0"

__all__ = [
    "BoundResult", "Direction", "InitialDistribution", "Kind", "MomentConstraint", "Polynomial",
    "UncertaintyProblem", "VariableSpace", "VectorField", "bound_interval", "build_bound_program",
    "compute_bound", "consistency_check", "degree_sweep", "estimate_expectation", "integrate",
    "lie_derivative", "moment_constraints_from_mean_cov", "parse_expression", "render",
    "sample_initial", "transport_residual",
]
