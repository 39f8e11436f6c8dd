"""Penalty solver and verification tools for elliptic variational inequalities
with a gradient constraint and an obstacle."""

from .grid import Grid, build_grid
from .lagrange import complementarity_report, extract_fields
from .oracle import AdmmOptions, AdmmVISolver, solve_vi_admm
from .penalty import PenaltyParams
from .problem import Domain, Problem, load_problem, parse_expression, validate_data
from .solver import PenaltyVISolver, SolveOptions, continuation_solve, solve_penalized

__version__ = "0.1.0"

__all__ = [
    "AdmmOptions",
    "AdmmVISolver",
    "Domain",
    "Grid",
    "PenaltyParams",
    "PenaltyVISolver",
    "Problem",
    "SolveOptions",
    "build_grid",
    "complementarity_report",
    "continuation_solve",
    "extract_fields",
    "load_problem",
    "parse_expression",
    "solve_penalized",
    "solve_vi_admm",
    "validate_data",
]
