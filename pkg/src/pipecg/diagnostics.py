"""Rounding-error diagnostics: gap observers, propagation norms and bounds.

Observers are plain callables with a ``needs`` attribute naming the snapshot
vectors they read; they are run synchronously by the solvers. Everything
else in this module is post-processing of a finished :class:`SolveReport`.
"""

from __future__ import annotations

import math
from fractions import Fraction
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .linalg import (
    SymTridiag,
    invert_upper_triangular,
    leading_block_max_norms,
    max_abs_norm,
    norm2,
    poly_eval,
    shifted_poly_apply,
    spmv,
    sym_tridiag_eigenvalues,
)
from .problems import LinearSystem
from .shifts import ShiftSchedule, chebyshev_shifts
from .solvers import SolveReport, SolverConfig, plcg_solve


# ---------------------------------------------------------------- traces


@dataclass
class GapTrace:
    """Per-iteration records, one per observed solution update."""

    iters: list[int] = field(default_factory=list)
    series: dict[str, list[float]] = field(default_factory=dict)

    def add(self, it: int, **values: float):
        if self.iters and it <= self.iters[-1]:
            raise ValueError(f"iteration {it} recorded after {self.iters[-1]}")
        k = len(self.iters)
        self.iters.append(it)
        for name, val in values.items():
            col = self.series.setdefault(name, [])
            col.extend([math.nan] * (k - len(col)))
            col.append(float(val))

    def __len__(self):
        return len(self.iters)

    def __getitem__(self, name: str) -> np.ndarray:
        col = self.series[name]
        return np.asarray(col + [math.nan] * (len(self.iters) - len(col)))

    def value(self, name: str, it: int) -> Optional[float]:
        """Value at global iteration ``it``; None when not recorded."""
        col = self.series.get(name)
        if col is None:
            return None
        k = _bisect(self.iters, it)
        if k is None or k >= len(col) or math.isnan(col[k]):
            return None
        return col[k]


def _bisect(xs, x):
    import bisect

    k = bisect.bisect_left(xs, x)
    return k if k < len(xs) and xs[k] == x else None


# ---------------------------------------------------------------- observers


class _Observer:
    needs: frozenset = frozenset()

    def __init__(self, system: LinearSystem):
        self.system = system
        self.trace = GapTrace()

    def _true_residual(self, x):
        return self.system.b - spmv(self.system.A, np.asarray(x))


class TrueResidualObserver(_Observer):
    needs = frozenset({"x"})

    def __call__(self, snap):
        self.trace.add(snap.iter, true_res=norm2(self._true_residual(snap["x"])))


class CgGapObserver(_Observer):
    """f_j = (b - A x_j) - r_j for classic CG."""

    needs = frozenset({"x", "r"})

    def __call__(self, snap):
        res = self._true_residual(snap["x"])
        self.trace.add(snap.iter, true_res=norm2(res), gap_f=norm2(res - snap["r"]))


class PcgGapObserver(_Observer):
    """Residual gap f and the auxiliary gaps g = Ap - s, h = Ar - w, e = As - z."""

    needs = frozenset({"x", "r", "w", "p", "s", "z"})

    def __call__(self, snap):
        A = self.system.A
        res = self._true_residual(snap["x"])
        self.trace.add(
            snap.iter,
            true_res=norm2(res),
            gap_f=norm2(res - snap["r"]),
            gap_g=norm2(spmv(A, snap["p"]) - snap["s"]),
            gap_h=norm2(spmv(A, snap["r"]) - snap["w"]),
            gap_e=norm2(spmv(A, snap["s"]) - snap["z"]),
        )


class PlcgBasisGapObserver(_Observer):
    """Basis gap v_bold_j - v_j of p(l)-CG.

    v_bold_{j+1} = (A v_j - gamma_j v_j - delta_{j-1} v_{j-1}) / delta_j is
    formed from the solver's computed v's; with a preconditioner, A is
    replaced by M^{-1} A. The recorded gap at iteration j is ||v_bold_j - v_j||;
    after a restart v_bold_0 = v_0 again.
    """

    needs = frozenset({"v", "v_next"})

    def __init__(self, system: LinearSystem, preconditioner=None):
        super().__init__(system)
        self.M = preconditioner
        self.vbold = None  # v_bold_j of the current snapshot
        self._next = None
        self._v_prev = None
        self._delta_prev = 0.0

    def __call__(self, snap):
        if "v" not in snap.vectors:
            return  # final update of an exhausted Krylov space: no basis vector
        v = np.asarray(snap["v"])
        if snap.local_iter == 0:
            self.vbold = v.copy()
            self._v_prev = np.zeros_like(v)
            self._delta_prev = 0.0
        else:
            self.vbold = self._next
        gap = norm2(self.vbold - v)
        gamma, delta = snap.scalars["gamma"], snap.scalars["delta"]
        if delta == 0.0:
            # Krylov space exhausted: v_bold_{j+1} is undefined
            self._next = None
            self.trace.add(snap.iter, gap_v=gap)
            return
        Av = spmv(self.system.A, v)
        if self.M is not None:
            Av = self.M(Av)
        self._next = (Av - gamma * v - self._delta_prev * self._v_prev) / delta
        self._v_prev, self._delta_prev = v.copy(), delta
        self.trace.add(snap.iter, gap_v=gap, gap_v_next=norm2(self._next - snap["v_next"]))


class PlcgResidualGapObserver(_Observer):
    """r_bold_j - r_j = ||b - A x_j|| (v_bold_j - v_j) + (||b - A x_j|| - |zeta_j|) v_j."""

    def __init__(self, system: LinearSystem, basis: Optional[PlcgBasisGapObserver] = None,
                 preconditioner=None):
        super().__init__(system)
        self._own_basis = basis is None
        self.basis = basis if basis is not None else PlcgBasisGapObserver(system, preconditioner)
        self.needs = frozenset({"x", "v"}) | self.basis.needs

    def __call__(self, snap):
        if self._own_basis:
            self.basis(snap)
        tr = norm2(self._true_residual(snap["x"]))
        if "v" not in snap.vectors:
            self.trace.add(snap.iter, true_res=tr)
            return
        v = np.asarray(snap["v"])
        first = tr * (self.basis.vbold - v)
        second = (tr - abs(snap.scalars["zeta"])) * v
        self.trace.add(
            snap.iter,
            true_res=tr,
            gap_resid=norm2(first + second),
            gap_resid_first=norm2(first),
            gap_resid_second=norm2(second),
        )


class SnapshotRecorder:
    """Keeps copies of every snapshot (small problems and tests)."""

    def __init__(self, needs: Sequence[str] = ()):
        self.needs = frozenset(needs)
        self.snapshots = []

    def __call__(self, snap):
        from dataclasses import replace

        self.snapshots.append(
            replace(snap, vectors={k: np.array(v) for k, v in snap.vectors.items()},
                    scalars=dict(snap.scalars))
        )


def true_residual_observer(system):
    return TrueResidualObserver(system)


def cg_gap_observer(system):
    return CgGapObserver(system)


def pcg_gap_observer(system):
    return PcgGapObserver(system)


def plcg_basis_gap_observer(system, preconditioner=None):
    return PlcgBasisGapObserver(system, preconditioner)


def plcg_residual_gap_observer(system, basis=None, preconditioner=None):
    return PlcgResidualGapObserver(system, basis, preconditioner)


# ---------------------------------------------------------------- propagation norms


@dataclass
class PropagationNormTrace:
    """``values[k]`` is the max-norm of the propagation matrix at global
    iteration ``iters[k]``; NaN where the matrix is numerically singular."""

    method: str
    iters: np.ndarray
    values: np.ndarray
    singular: np.ndarray

    def value(self, it: int) -> Optional[float]:
        k = _bisect(list(self.iters), it)
        if k is None or self.singular[k]:
            return None
        return float(self.values[k])


def pcg_binv_max_norms(beta) -> np.ndarray:
    """||B_{j+1}^{-1}||_max for j = 0..len(beta)-1, with B upper bidiagonal
    (1 on the diagonal, -beta_k on the superdiagonal).

    The entries of the inverse are products beta_i ... beta_k, so the maximum
    follows from the best product ending at each k.
    """
    beta = np.asarray(beta, dtype=np.float64)
    out = np.empty(len(beta))
    best_end = 0.0
    running = 1.0
    for k, b in enumerate(beta):
        if k > 0:
            best_end = abs(b) * max(1.0, best_end)
            running = max(running, best_end)
        out[k] = running
    return out


def propagation_norms(report: SolveReport, method: Optional[str] = None) -> PropagationNormTrace:
    """Per-iteration max-norm of U_j (CG), B_{j+1}^{-1} (p-CG) or G_{j+1}^{-1}
    (p(l)-CG) at every recorded iteration j.

    For p(l)-CG the value at global iteration offset + a is that of the
    leading (a+1)x(a+1) block of the segment's G; singular blocks (at and
    after a breakdown) are flagged.
    """
    method = method or report.method
    n = len(report.rec_res)
    iters = np.arange(n)
    if method == "cg":
        return PropagationNormTrace(method, iters, np.ones(n), np.zeros(n, bool))
    if method == "pcg":
        return PropagationNormTrace(method, iters, pcg_binv_max_norms(report.history["beta"][:n]),
                                    np.zeros(n, bool))
    if method != "plcg":
        raise ValueError(f"unknown method {method!r}")
    values = np.full(n, np.nan)
    for si, seg in enumerate(report.segments):
        stop = report.segments[si + 1].offset if si + 1 < len(report.segments) else n
        count = stop - seg.offset
        if count <= 0:
            continue
        nc = seg.n_cols
        norms = leading_block_max_norms(seg.G[:nc, :nc]) if nc else np.empty(0)
        k = min(count, len(norms))
        values[seg.offset: seg.offset + k] = norms[:k]
    return PropagationNormTrace(method, iters, values, ~np.isfinite(values))


# ---------------------------------------------------------------- bounds


def _shift_array(shifts) -> np.ndarray:
    return np.asarray(shifts.as_array() if isinstance(shifts, ShiftSchedule) else shifts, float)


def lemma_bounds(H: SymTridiag, shifts, l: int):
    """Ritz-value bound (min_k |P_l(theta_k)|)^{-1} on ||G_{l+1:j}^{-1}||_max,
    plus the monomial-basis bound (1/min_k |theta_k|)^l when all shifts are
    zero (None otherwise). ``H`` is H_{j-l,j-l}.

    A Ritz value on a root of P_l (or a zero Ritz value) gives ``inf``.
    """
    if not H.is_square:
        raise ValueError("lemma_bounds needs a square tridiagonal H")
    sigma = _shift_array(shifts)
    if len(sigma) != l:
        raise ValueError(f"{len(sigma)} shifts for pipeline depth {l}")
    theta = sym_tridiag_eigenvalues(H)
    pmin = float(np.min(np.abs(poly_eval(theta, sigma))))
    ritz = math.inf if pmin == 0.0 else 1.0 / pmin
    monomial = None
    if np.all(sigma == 0.0):
        tmin = float(np.min(np.abs(theta)))
        monomial = math.inf if tmin == 0.0 else (1.0 / tmin) ** l
    return ritz, monomial


def basis_transform_matrix(H: SymTridiag, shifts, l: int) -> np.ndarray:
    """Exact-arithmetic j x j basis transformation G_j implied by H = H_{j,j}:
    column k is P_k(H) e_0 for k <= l and P_l(H) e_{k-l} for k > l, with
    P_k the product of the first k shifts."""
    if not H.is_square:
        raise ValueError("basis_transform_matrix needs a square tridiagonal H")
    sigma = _shift_array(shifts)
    j = H.dim
    Hd = H.to_dense()
    G = np.zeros((j, j))
    vec = np.zeros(j)
    vec[0] = 1.0
    for k in range(min(j, l + 1)):
        G[:, k] = vec
        if k < l:
            vec = Hd @ vec - sigma[k] * vec
    if j > l + 1:
        P = shifted_poly_apply(H, sigma)
        G[:, l + 1:] = P[:, 1: j - l]
    return G


def basis_transform_bound(H: SymTridiag, shifts, l: int) -> float:
    """||G_j(H)^{-1}||_2 for the exact-arithmetic basis transformation of
    :func:`basis_transform_matrix`: the Ritz-type bound extended from the
    principal submatrix G_{l+1:j} to all of G_j."""
    G = basis_transform_matrix(H, shifts, l)
    smin = float(np.linalg.svd(G, compute_uv=False).min())
    return math.inf if smin == 0.0 else 1.0 / smin


def lemma2_check(report: SolveReport, l: int, j: int, segment: int = 0) -> float:
    """max |G_{l+1:j} - S P_l(H_{j,j})| where S shifts rows up by l, i.e. the
    entry (m, k) of the principal submatrix is compared to P_l(H)[m+l, k]."""
    if j < l + 1:
        raise ValueError("lemma2_check needs j >= l + 1")
    seg = report.segments[segment]
    if seg.n_cols < j:
        raise ValueError(f"segment has {seg.n_cols} finalised columns, need {j}")
    P = shifted_poly_apply(seg.H(j), seg.shifts)
    shift = np.eye(j - l, j, k=l)  # exact 0/1 row shift
    rhs = (shift @ P)[:, : j - l]
    return float(np.max(np.abs(seg.G[l:j, l:j] - rhs)))


# ---------------------------------------------------------------- gap formula oracle


def _exact(M) -> np.ndarray:
    """Object array of Fractions holding the float entries exactly."""
    M = np.asarray(M, dtype=np.float64)
    out = np.empty(M.shape, dtype=object)
    for idx, val in np.ndenumerate(M):
        out[idx] = Fraction(float(val))
    return out


def _exact_upper_inverse(T: np.ndarray) -> np.ndarray:
    k = T.shape[0]
    X = np.full((k, k), Fraction(0), dtype=object)
    for c in range(k):
        X[c, c] = 1 / T[c, c]
        for r in range(c - 1, -1, -1):
            acc = sum((T[r, m] * X[m, c] for m in range(r + 1, c + 1)), Fraction(0))
            X[r, c] = -acc / T[r, r]
    return X


def _to_float(M: np.ndarray) -> np.ndarray:
    return np.vectorize(float, otypes=[np.float64])(M) if M.size else np.zeros(M.shape)


@dataclass
class GapFormulaCheck:
    """Basis gap V_bold_{j+1} - V_{j+1} measured directly and rebuilt from the
    local error matrices, all evaluated exactly (rationals) from the recorded
    floating-point V, Z, G, gamma, delta and A.

    ``reconstructed`` is (Theta^z_j - A Theta^v_j + Theta^v_{j+1} B) G_j^{-1} Delta^+.
    That expression assumes G_{j+1} B = H_{j+1,j} G_j, which the rounded
    coefficients satisfy only approximately; ``coefficient_term`` is the
    contribution V_{j+1} (G_{j+1} B - H G_j) G_j^{-1} Delta^+ of that residual,
    so ``measured == reconstructed + coefficient_term`` holds exactly.
    """

    measured: np.ndarray
    reconstructed: np.ndarray
    coefficient_term: np.ndarray
    closure: float  # exact max |measured - reconstructed - coefficient_term|

    @property
    def discrepancy(self) -> float:
        return float(np.max(np.abs(self.measured - self.reconstructed)))


def z_recurrence_matrix(gamma, delta, shifts, l: int, j: int) -> np.ndarray:
    """(j+1) x j matrix B with A Z_j = Z_{j+1} B in exact arithmetic."""
    sigma = _shift_array(shifts)
    B = np.zeros((j + 1, j))
    for k in range(j):
        if k < l:
            B[k, k] = sigma[k]
            B[k + 1, k] = 1.0
        else:
            m = k - l
            B[k, k] = gamma[m]
            B[k + 1, k] = delta[m]
            if m >= 1:
                B[k - 1, k] = delta[m - 1]
    return B


def gap_formula_check(report: SolveReport, system: LinearSystem, j: Optional[int] = None,
                      segment: int = 0) -> GapFormulaCheck:
    """Exact-arithmetic check of the basis-gap propagation formula on a
    standard-mode, unpreconditioned run with retained V/Z history.

    Rational arithmetic makes this practical only for small systems
    (n and j around ten).
    """
    seg = report.segments[segment]
    if seg.V is None:
        raise ValueError("report carries no V/Z history; run with a history observer")
    l = report.pipeline_depth
    jmax = min(seg.n_cols, len(seg.V), len(seg.Z)) - 1
    j = jmax if j is None else j
    if not 1 <= j <= jmax:
        raise ValueError(f"j must be in [1, {jmax}]")
    A = _exact(system.A.to_dense())
    V = _exact(np.column_stack(seg.V[: j + 1]))
    Z = _exact(np.column_stack(seg.Z[: j + 1]))
    G = _exact(np.triu(seg.G[: j + 1, : j + 1]))
    gamma = _exact(seg.gamma[:j])
    delta = _exact(seg.delta[:j])
    B = _exact(z_recurrence_matrix(seg.gamma, seg.delta, seg.shifts, l, j))
    H = _exact(SymTridiag(seg.gamma[:j], seg.delta[:j]).to_dense())  # (j+1) x j

    AV = A @ V[:, :j]
    measured = np.full(V.shape, Fraction(0), dtype=object)
    for k in range(j):
        prev = delta[k - 1] * V[:, k - 1] if k >= 1 else Fraction(0)
        measured[:, k + 1] = (AV[:, k] - gamma[k] * V[:, k] - prev) / delta[k] - V[:, k + 1]

    theta_v = Z - V @ G
    theta_z = A @ Z[:, :j] - Z @ B
    ginv = _exact_upper_inverse(G[:j, :j])
    dplus = np.full((j, j + 1), Fraction(0), dtype=object)
    for k in range(j):
        dplus[k, k + 1] = 1 / delta[k]
    right = ginv @ dplus
    recon = (theta_z - A @ theta_v[:, :j] + theta_v @ B) @ right
    coeff = (V @ (G @ B - H @ G[:j, :j])) @ right
    closure = max(abs(x) for x in (measured - recon - coeff).ravel())
    return GapFormulaCheck(_to_float(measured), _to_float(recon), _to_float(coeff), float(closure))


# ---------------------------------------------------------------- Table-1 grid


@dataclass(frozen=True)
class BoundsCell:
    l: int
    j: int
    ginv_maxnorm: float
    ritz_bound: float  # ||G_j(H_{j,j})^{-1}||_2, full-matrix Ritz-type bound
    lemma3_bound: float  # (min_k |P_l(theta_k)|)^{-1}, theta from H_{j-l,j-l}
    monomial_bound: Optional[float] = None


@dataclass
class BoundsTable:
    cells: list[BoundsCell]

    def cell(self, l: int, j: int) -> BoundsCell:
        for c in self.cells:
            if c.l == l and c.j == j:
                return c
        raise KeyError((l, j))

    def grid(self, attr: str, l_values, j_values) -> np.ndarray:
        return np.array([[getattr(self.cell(l, j), attr) for l in l_values] for j in j_values])


def leja_chebyshev(system: LinearSystem) -> Callable[[int], ShiftSchedule]:
    """Shift factory: Leja-ordered Chebyshev roots on the system's spectral
    interval (falls back to [0, 8])."""
    lo, hi = system.spectral_interval or (0.0, 8.0)
    return lambda l: chebyshev_shifts(l, lo, hi, order="leja")


def _table_column(system, l, j_values, shifts, restart_policy):
    cfg = SolverConfig(max_iters=max(j_values), tol=0.0, pipeline_depth=l, shifts=shifts,
                       restart_policy=restart_policy)
    report = plcg_solve(system, cfg)
    seg = report.segments[0]
    nc = seg.n_cols
    norms = leading_block_max_norms(seg.G[:nc, :nc])
    cells = []
    for j in j_values:
        if j > len(norms):
            # after a breakdown G_j is singular: no data, like the figures
            cells.append(BoundsCell(l, j, math.nan, math.nan, math.nan,
                                    math.nan if _is_monomial(shifts) else None))
            continue
        full = basis_transform_bound(seg.H(j), shifts, l)
        if j > l:
            ritz, mono = lemma_bounds(seg.H(j - l), shifts, l)
        else:
            ritz, mono = math.nan, (math.nan if _is_monomial(shifts) else None)
        cells.append(BoundsCell(l, j, float(norms[j - 1]), full, ritz, mono))
    return cells


def _is_monomial(shifts) -> bool:
    return bool(np.all(_shift_array(shifts) == 0.0))


def table1_grid(system: LinearSystem, l_values=(1, 2, 3, 4, 5, 10),
                j_values=(10, 50, 100, 200, 400),
                shifts_fn: Optional[Callable[[int], ShiftSchedule]] = None,
                restart_policy: str = "restart_on_breakdown", jobs: int = 1) -> BoundsTable:
    """Measured ||G_j^{-1}||_max and bounds on an (l, j) grid, one standard
    p(l)-CG run per l. Cells beyond the first breakdown are NaN."""
    shifts_fn = shifts_fn or leja_chebyshev(system)
    tasks = [(system, l, tuple(j_values), shifts_fn(l), restart_policy) for l in l_values]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            columns = list(pool.map(_table_column, *zip(*tasks)))
    else:
        columns = [_table_column(*t) for t in tasks]
    return BoundsTable([c for col in columns for c in col])


def lemma1_ratio(report: SolveReport, segment: int = 0) -> float:
    """max |g_{m,k}| / max_k ||z_k|| over the finalised part of G (needs Z history)."""
    seg = report.segments[segment]
    if seg.Z is None:
        raise ValueError("report carries no Z history")
    nc = min(seg.n_cols, len(seg.Z))
    zmax = max(norm2(z) for z in seg.Z[:nc])
    return max_abs_norm(np.triu(seg.G[:nc, :nc])) / zmax


class RetainHistory:
    """No-op observer whose subscription makes p(l)-CG keep full V/Z history."""

    needs = frozenset({"history"})

    def __call__(self, snap):
        pass
