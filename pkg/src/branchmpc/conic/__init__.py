"""Embedded primal-dual interior-point solver for QP/SOCP subproblems."""

from .program import ConicProgram, SecondOrderCone, Solution, dump_program
from .solver import Settings, solve, solve_qp

__all__ = [
    "ConicProgram",
    "SecondOrderCone",
    "Solution",
    "Settings",
    "dump_program",
    "solve",
    "solve_qp",
]
