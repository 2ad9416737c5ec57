"""Self-contained LP (bounded simplex) and MILP (branch and bound) solver."""
from .bb import MAX_BRUTE_BINARIES, brute_force, solve_lp, solve_milp
from .problem import (EQ, GAP_LIMIT, GE, INFEASIBLE, LE, NODE_LIMIT, NUMERICAL, OPTIMAL, TIME_LIMIT,
                      UNBOUNDED, MilpProblem, MilpSolution, ProblemError, Tolerances, relative_gap)

__all__ = [
    "EQ", "GE", "LE", "OPTIMAL", "INFEASIBLE", "UNBOUNDED", "GAP_LIMIT", "NODE_LIMIT", "TIME_LIMIT",
    "NUMERICAL", "MilpProblem", "MilpSolution", "ProblemError", "Tolerances", "relative_gap",
    "solve_lp", "solve_milp", "brute_force", "MAX_BRUTE_BINARIES",
]
