from .base import (
    BreakdownError,
    BreakdownEvent,
    IndefiniteMatrixError,
    IterationSnapshot,
    PlcgSegment,
    Preconditioner,
    RestartEvent,
    SolveReport,
    SolverConfig,
    SolverError,
    jacobi_preconditioner,
)
from .cg import cg_solve
from .pipecg import pcg_solve
from .plcg import default_shifts, plcg_solve

SOLVERS = {"cg": cg_solve, "pcg": pcg_solve, "plcg": plcg_solve}


def solve(method: str, system, cfg, observer=None):
    try:
        fn = SOLVERS[method]
    except KeyError:
        raise ValueError(f"unknown method {method!r}; expected one of {sorted(SOLVERS)}") from None
    return fn(system, cfg, observer)
