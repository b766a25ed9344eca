from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence

import numpy as np

from ..linalg import SparseMatrixCsr, SymTridiag
from ..shifts import ShiftSchedule

RECURRENCE_MODES = ("standard", "stabilized")
RESTART_POLICIES = ("restart_on_breakdown", "fail_on_breakdown")


class SolverError(ArithmeticError):
    pass


class IndefiniteMatrixError(SolverError):
    def __init__(self, iteration: int, value: float):
        super().__init__(f"(s, p) = {value!r} <= 0 at iteration {iteration}; matrix is not SPD")
        self.iteration = iteration
        self.value = value


class BreakdownError(SolverError):
    def __init__(self, iteration: int, message: str, root_argument: Optional[float] = None):
        super().__init__(f"breakdown at iteration {iteration}: {message}")
        self.iteration = iteration
        self.root_argument = root_argument


@dataclass(frozen=True)
class Preconditioner:
    """Action v -> M^{-1} v. Assumed linear and SPD; not checked."""

    apply: Callable[[np.ndarray], np.ndarray]
    name: str = "custom"

    def __call__(self, v):
        return self.apply(v)


def jacobi_preconditioner(A: SparseMatrixCsr) -> Preconditioner:
    d = A.diagonal()
    if np.any(~(d > 0)):
        i = int(np.flatnonzero(~(d > 0))[0])
        raise ValueError(f"Jacobi preconditioner needs a positive diagonal (row {i} has {d[i]!r})")
    d = d.copy()
    return Preconditioner(lambda v: v / d, "jacobi")


@dataclass
class SolverConfig:
    max_iters: int = 500
    tol: float = 0.0
    pipeline_depth: int = 1
    shifts: Optional[ShiftSchedule] = None
    recurrence_mode: str = "standard"
    restart_policy: str = "restart_on_breakdown"
    preconditioner: Optional[Preconditioner] = None

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.tol >= 0:
            raise ValueError("tolerance must be >= 0")
        if self.pipeline_depth < 1:
            raise ValueError("pipeline depth must be >= 1")
        if self.recurrence_mode not in RECURRENCE_MODES:
            raise ValueError(f"recurrence_mode must be one of {RECURRENCE_MODES}")
        if self.restart_policy not in RESTART_POLICIES:
            raise ValueError(f"restart_policy must be one of {RESTART_POLICIES}")
        if self.shifts is not None and len(self.shifts) != self.pipeline_depth:
            raise ValueError(
                f"{len(self.shifts)} shifts given for pipeline depth {self.pipeline_depth}"
            )


@dataclass(frozen=True)
class RestartEvent:
    iteration: int
    root_argument: float
    residual_norm: float = float("nan")
    kind: str = "restart"


@dataclass(frozen=True)
class BreakdownEvent:
    iteration: int
    root_argument: float
    kind: str = "breakdown"


@dataclass
class IterationSnapshot:
    """State after solution update ``iter`` (global, counted across restarts).

    ``vectors`` holds read-only views of the arrays an observer subscribed
    to; the solver never writes into an array after exposing it.
    """

    method: str
    iter: int
    rec_res: float
    scalars: dict[str, float]
    vectors: dict[str, np.ndarray]
    local_iter: int = 0
    segment: int = 0
    restarted: bool = False
    H: Optional[SymTridiag] = None
    G: Optional[np.ndarray] = None

    def __getitem__(self, name):
        return self.vectors[name]


@dataclass
class PlcgSegment:
    """Data of one p(l)-CG run between restarts."""

    offset: int
    shifts: np.ndarray
    G: np.ndarray
    gamma: np.ndarray
    delta: np.ndarray
    n_cols: int = 0
    V: Optional[list] = None
    Z: Optional[list] = None
    Zhat: Optional[list] = None

    def G_prefix(self, j: int) -> np.ndarray:
        return self.G[:j, :j]

    def H(self, j: int, rectangular: bool = False) -> SymTridiag:
        return SymTridiag(self.gamma[:j], self.delta[: j if rectangular else max(j - 1, 0)])


@dataclass
class SolveReport:
    method: str
    x: np.ndarray
    converged: bool
    iterations: int
    r0_norm: float
    events: list = field(default_factory=list)
    history: dict[str, list] = field(default_factory=dict)
    segments: list[PlcgSegment] = field(default_factory=list)
    snapshots: Optional[list[IterationSnapshot]] = None
    pipeline_depth: Optional[int] = None
    recurrence_mode: Optional[str] = None
    # "converged", "max_iters" or "exhausted" (p(l)-CG ran out of Krylov space)
    stop_reason: Optional[str] = None

    def __post_init__(self):
        if self.stop_reason is None:
            self.stop_reason = "converged" if self.converged else "max_iters"

    @property
    def rec_res(self) -> np.ndarray:
        return np.asarray(self.history.get("rec_res", []))


def as_observers(observer) -> list:
    if observer is None:
        return []
    if isinstance(observer, (list, tuple)):
        return [o for o in observer if o is not None]
    return [observer]


def subscriptions(observers: Sequence[Any]) -> set[str]:
    needs: set[str] = set()
    for obs in observers:
        needs |= set(getattr(obs, "needs", ()))
    return needs


def frozen(v: np.ndarray) -> np.ndarray:
    view = v.view()
    view.flags.writeable = False
    return view


def notify(observers, snap: IterationSnapshot):
    for obs in observers:
        obs(snap)
