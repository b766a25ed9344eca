"""Deep-pipelined CG, p(l)-CG, with optional preconditioning and the
stabilized (three-term Lanczos) basis recurrence.

Index conventions follow the loop counter ``i`` of the pipelined listing:
z_{i+1} is produced in loop step i, the basis vector v_{a+1} and column a+1
of the banded transformation G (Z = V G) are finalised in step i with
a = i - l, and the solution update x_a happens at the end of that step.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from ..linalg import SymTridiag, dot, spmv
from ..problems import LinearSystem
from ..shifts import ShiftSchedule, chebyshev_shifts, monomial_shifts
from .base import (
    BreakdownError,
    IterationSnapshot,
    PlcgSegment,
    RestartEvent,
    SolveReport,
    SolverConfig,
    as_observers,
    frozen,
    notify,
    subscriptions,
)

HISTORY_KEYS = {"history", "V_history", "Z_history"}
EXHAUSTION_DROP = 1e-3


def default_shifts(system: LinearSystem, l: int) -> ShiftSchedule:
    """Leja-ordered Chebyshev shifts on the system's spectral interval when
    one is known, monomial (all-zero) shifts otherwise."""
    if system.spectral_interval is not None:
        lo, hi = system.spectral_interval
        if lo < hi:
            return chebyshev_shifts(l, lo, hi, order="leja")
    return monomial_shifts(l)


class _Growable:
    """Square float array that doubles its capacity on demand."""

    def __init__(self, size: int):
        self.data = np.zeros((size, size))

    def ensure(self, k: int):
        size = self.data.shape[0]
        if k < size:
            return
        new = max(2 * size, k + 1)
        grown = np.zeros((new, new))
        grown[:size, :size] = self.data
        self.data = grown


def _vec_growable(size: int) -> np.ndarray:
    return np.zeros(size)


def plcg_solve(system: LinearSystem, cfg: SolverConfig, observer=None) -> SolveReport:
    """Run p(l)-CG for at most ``cfg.max_iters`` solution updates.

    On a square-root breakdown with ``restart_on_breakdown`` the pending
    solution update is completed and the iteration restarted from it; the
    restart itself occupies one (global) iteration index and is reported as
    a RestartEvent.
    """
    observers = as_observers(observer)
    needs = subscriptions(observers)
    keep_history = bool(needs & HISTORY_KEYS)
    l = cfg.pipeline_depth
    shifts = cfg.shifts if cfg.shifts is not None else default_shifts(system, l)
    if len(shifts) != l:
        raise ValueError(f"{len(shifts)} shifts given for pipeline depth {l}")
    sigma = np.asarray(shifts.as_array() if isinstance(shifts, ShiftSchedule) else shifts, float)
    M = cfg.preconditioner
    A, b = system.A, system.b

    report = SolveReport(
        "plcg", system.x0.copy(), False, 0, float("nan"),
        history={"rec_res": [], "gamma": [], "delta": [], "eta": [], "zeta": []},
        pipeline_depth=l, recurrence_mode=cfg.recurrence_mode,
    )
    x = system.x0.copy()
    offset = 0
    r0_ref: Optional[float] = None
    restart_root: Optional[float] = None
    while True:
        outcome = _run_segment(
            A, b, x, M, l, sigma, cfg, observers, needs, keep_history, offset,
            r0_ref, restart_root, report,
        )
        x, status = outcome[0], outcome[1]
        if r0_ref is None:
            r0_ref = report.r0_norm
        if status != "restart":
            break
        _, _, offset, restart_root = outcome
    report.x = x
    return report


def _run_segment(A, b, x0, M, l, sigma, cfg, observers, needs, keep_history, offset,
                 r0_ref, restart_root, report):
    standard = cfg.recurrence_mode == "standard"
    max_a = cfg.max_iters - offset

    rhat = b - spmv(A, x0)
    if M is None:
        r = rhat
        rnorm = math.sqrt(dot(r, r))
    else:
        r = M(rhat)
        rnorm = math.sqrt(dot(rhat, r))
    if r0_ref is None:
        report.r0_norm = rnorm
        r0_ref = rnorm
    if rnorm == 0.0:
        report.converged = True
        report.stop_reason = "converged"
        report.iterations = offset
        return x0, "converged"

    cap = min(cfg.max_iters, 64) + 2 * l + 4
    Gbuf = _Growable(cap)
    gamma = _vec_growable(cap)
    delta = _vec_growable(cap)
    seg = PlcgSegment(offset, sigma.copy(), Gbuf.data, gamma, delta)
    if keep_history:
        seg.V, seg.Z, seg.Zhat = [], [], []
    report.segments.append(seg)
    seg_index = len(report.segments) - 1

    v = {0: r / rnorm}
    z = {0: v[0]}
    zhat = z if M is None else {0: rhat / rnorm}
    Gbuf.data[0, 0] = 1.0
    zero = np.zeros_like(r)
    if keep_history:
        seg.V.append(v[0])
        seg.Z.append(z[0])
        seg.Zhat.append(zhat[0])

    x = x0
    eta = zeta = None
    p = None
    hist = report.history
    i = 0
    while True:
        a = i - l
        # pipeline SPMV
        if i < l:
            zh_new = spmv(A, z[i]) - sigma[i] * zhat[i]
        else:
            zh_new = spmv(A, z[i])
        z_new = zh_new if M is None else M(zh_new)

        if a >= 0:
            c = a + 1
            Gbuf.ensure(c + l + 2)
            if len(gamma) <= c:
                gamma = np.concatenate([gamma, np.zeros(len(gamma))])
                delta = np.concatenate([delta, np.zeros(len(delta))])
                seg.gamma, seg.delta = gamma, delta
            G = Gbuf.data
            seg.G = G
            lo = max(0, c - 2 * l)
            for j in range(max(0, a - l + 2), a + 1):
                acc = G[j, c]
                for k in range(lo, j):
                    acc -= G[k, j] * G[k, c]
                G[j, c] = acc / G[j, j]
            root_arg = G[c, c]
            for k in range(lo, c):
                root_arg -= G[k, c] * G[k, c]
            if not root_arg > 0:
                return _pivot_failure(
                    A, b, M, x, p, zeta, eta, rnorm, a, l, sigma, G, gamma, delta, v, max_a,
                    offset, r0_ref, restart_root, root_arg, cfg, observers, needs, seg, seg_index,
                    report,
                )
            G[c, c] = math.sqrt(root_arg)
            seg.n_cols = c + 1

            d_prev = delta[a - 1] if a >= 1 else 0.0
            gamma[a] = _gamma(G, gamma, delta, sigma, a, l)
            if a < l:
                delta[a] = G[c, c] / G[a, a]
            else:
                delta[a] = (G[c, c] * delta[a - l]) / G[a, a]
            if delta[a] == 0.0 or not math.isfinite(delta[a]):
                raise BreakdownError(offset + a, f"delta_{a} = {delta[a]!r}")

            v_prev = v.get(a - 1, zero)
            if standard:
                acc = z[c]
                for j in range(max(0, a - 2 * l + 1), a + 1):
                    acc = acc - G[j, c] * v[j]
                v[c] = acc / G[c, c]
            else:
                Av = spmv(A, v[a])
                if M is not None:
                    Av = M(Av)
                v[c] = (Av - gamma[a] * v[a] - d_prev * v_prev) / delta[a]

            zh_new = (zh_new - gamma[a] * zhat[i] - d_prev * zhat[i - 1]) / delta[a]
            if M is None:
                z_new = zh_new
            else:
                z_new = (z_new - gamma[a] * z[i] - d_prev * z[i - 1]) / delta[a]
            if keep_history:
                seg.V.append(v[c])

        z[i + 1] = z_new
        if M is not None:
            zhat[i + 1] = zh_new
        if keep_history:
            seg.Z.append(z_new)
            if M is not None:
                seg.Zhat.append(zh_new)
            else:
                seg.Zhat = seg.Z

        # inner products for column i+1 of G
        col = i + 1
        Gbuf.ensure(col + 1)
        G = Gbuf.data
        seg.G = G
        if a < 0:
            for j in range(0, col + 1):
                G[j, col] = dot(zh_new, z[j])
        else:
            for j in range(max(0, i - 2 * l + 1), a + 2):
                G[j, col] = dot(zh_new, v[j])
            for j in range(a + 2, col + 1):
                G[j, col] = dot(zh_new, z[j])

        # solution update
        stop = None
        if a == 0:
            eta = gamma[0]
            zeta = rnorm
            p = v[0] / eta
            _record(report, offset, 0, zeta, gamma, delta, eta)
            _emit(observers, needs, offset, 0, seg_index, zeta, x, v, p, z_new, gamma, delta,
                  eta, None, seg, restart_root)
            if offset >= cfg.max_iters:
                stop = "maxit"
        elif a >= 1:
            lam = delta[a - 1] / eta
            eta = gamma[a] - lam * delta[a - 1]
            if eta == 0.0 or not math.isfinite(eta):
                raise BreakdownError(offset + a, f"eta_{a} = {eta!r}")
            zeta_next = -lam * zeta
            p_next = (v[a] - delta[a - 1] * p) / eta
            x = x + zeta * p
            zeta, p = zeta_next, p_next
            _record(report, offset, a, zeta, gamma, delta, eta)
            _emit(observers, needs, offset, a, seg_index, zeta, x, v, p, z_new, gamma, delta,
                  eta, lam, seg, None)
            if abs(zeta) / r0_ref < cfg.tol:
                stop = "converged"
            elif a >= max_a:
                stop = "maxit"
        if stop is not None:
            report.converged = stop == "converged"
            report.stop_reason = "converged" if report.converged else "max_iters"
            report.iterations = offset + max(a, 0)
            return x, stop

        # drop vectors that no later step reads
        if not keep_history:
            v.pop(a - 2 * l, None)
            z.pop(i - l - 1, None)
            if M is not None:
                zhat.pop(i - l - 1, None)
        i += 1


def _record(report, offset, a, zeta, gamma, delta, eta):
    h = report.history
    h["rec_res"].append(abs(zeta))
    h["zeta"].append(zeta)
    h["eta"].append(eta)
    h["gamma"].append(gamma[a])
    h["delta"].append(delta[a])


def _gamma(G, gamma, delta, sigma, a, l):
    """gamma_a from column a+1 of G (entries above the diagonal only)."""
    c = a + 1
    d_prev = delta[a - 1] if a >= 1 else 0.0
    g_prev = G[a - 1, a] if a >= 1 else 0.0
    if a < l:
        return (G[a, c] + sigma[a] * G[a, a] - d_prev * g_prev) / G[a, a]
    return (G[a, a] * gamma[a - l] + G[a, c] * delta[a - l] - d_prev * g_prev) / G[a, a]


def _pivot_failure(A, b, M, x, p, zeta, eta, rnorm, a, l, sigma, G, gamma, delta, v, max_a,
                   offset, r0_ref, restart_root, root_arg, cfg, observers, needs, seg, seg_index,
                   report):
    """Non-positive pivot for column a+1 of G.

    Step a only needs gamma_a, which is already available, so it is completed
    with delta_a = 0 whenever eta_a is usable. Then, in order:

    * Krylov space exhausted: x_{a+1} = x_a + zeta_a p_a meets the tolerance
      or its explicit residual collapses far below that of x_a (a genuine
      breakdown barely improves on x_a); the run ends at a+1;
    * fail policy: BreakdownError;
    * step a was the last allowed one, or zeta_a meets the tolerance: stop;
    * otherwise restart from x_a, the restart occupying global index a+1.

    Returns ``(x, status)`` or ``(x, "restart", new_offset, root_arg)``.
    """
    it = offset + a
    root_arg = float(root_arg)
    fail = cfg.restart_policy == "fail_on_breakdown"
    step = _complete_step(G, gamma, delta, sigma, a, l, x, p, zeta, eta, rnorm, v)

    if step is not None and a < max_a:
        lam, eta_a, zeta_a, p_a, x_a, g = step
        x_next = x_a + zeta_a * p_a
        res = _explicit_residual(A, b, M, x_next)
        converged = res == 0.0 or res / r0_ref < cfg.tol
        if converged or res <= EXHAUSTION_DROP * _explicit_residual(A, b, M, x_a):
            _commit_step(report, observers, needs, offset, a, seg_index, step, gamma, delta, G,
                         v, seg, restart_root)
            h = report.history
            h["rec_res"].append(res)
            for key in ("zeta", "eta", "gamma", "delta"):
                h[key].append(math.nan)
            if observers:
                snap = IterationSnapshot(
                    "plcg", offset + a + 1, res, {"zeta": math.nan},
                    {"x": frozen(x_next)} if "x" in needs else {},
                    local_iter=a + 1, segment=seg_index,
                    H=SymTridiag(gamma[: a + 1], delta[: a + 1]),
                    G=frozen(seg.G[: a + 2, : a + 2]),
                )
                notify(observers, snap)
            report.converged = converged
            report.stop_reason = "converged" if converged else "exhausted"
            report.iterations = offset + a + 1
            return x_next, report.stop_reason

    if fail:
        raise BreakdownError(it, f"square root argument {root_arg!r} <= 0", root_arg)

    if step is None:
        # eta_a unusable as well: fall back to x_{a-1}, restart at index a
        if a <= 1:
            raise BreakdownError(it, f"square root argument {root_arg!r} <= 0 before any "
                                     "progress since the last (re)start", root_arg)
        report.events.append(RestartEvent(it, root_arg))
        report.iterations = it
        return x, "restart", it, root_arg

    _commit_step(report, observers, needs, offset, a, seg_index, step, gamma, delta, G, v, seg,
                 restart_root)
    zeta_a, x_a = step[2], step[4]
    if abs(zeta_a) / r0_ref < cfg.tol or a >= max_a:
        report.converged = abs(zeta_a) / r0_ref < cfg.tol
        report.stop_reason = "converged" if report.converged else "max_iters"
        report.iterations = it
        return x_a, report.stop_reason
    if a == 0:
        # x_0 is the segment start: restarting from it cannot progress
        raise BreakdownError(it, f"square root argument {root_arg!r} <= 0 before any progress "
                                 "since the last (re)start", root_arg)
    report.events.append(RestartEvent(it + 1, root_arg))
    report.iterations = it + 1
    return x_a, "restart", it + 1, root_arg


def _explicit_residual(A, b, M, x):
    rhat = b - spmv(A, x)
    return math.sqrt(dot(rhat, rhat) if M is None else dot(rhat, M(rhat)))


def _complete_step(G, gamma, delta, sigma, a, l, x, p, zeta, eta, rnorm, v):
    """Step a quantities (lambda, eta_a, zeta_a, p_a, x_a, gamma_a) without
    delta_a, or None if they are not finite."""
    g = _gamma(G, gamma, delta, sigma, a, l)
    if not math.isfinite(g) or g == 0.0:
        return None
    if a == 0:
        return None, g, rnorm, v[0] / g, x, g
    lam = delta[a - 1] / eta
    eta_a = g - lam * delta[a - 1]
    if eta_a == 0.0 or not math.isfinite(eta_a):
        return None
    return lam, eta_a, -lam * zeta, (v[a] - delta[a - 1] * p) / eta_a, x + zeta * p, g


def _commit_step(report, observers, needs, offset, a, seg_index, step, gamma, delta, G, v, seg,
                 restart_root):
    lam, eta_a, zeta_a, p_a, x_a, g = step
    gamma[a], delta[a] = g, 0.0
    G[a + 1, a + 1] = 0.0
    _record(report, offset, a, zeta_a, gamma, delta, eta_a)
    _emit(observers, needs, offset, a, seg_index, zeta_a, x_a, v, p_a, None, gamma, delta,
          eta_a, lam, seg, restart_root if a == 0 else None)


def _emit(observers, needs, offset, a, seg_index, zeta, x, v, p, z_new, gamma, delta, eta, lam,
          seg, restart_root):
    if not observers:
        return
    vecs = {"x": x, "v": v[a], "p": p, "z": z_new, "v_next": v.get(a + 1)}
    scalars = {"zeta": zeta, "gamma": gamma[a], "delta": delta[a], "eta": eta}
    if lam is not None:
        scalars["lambda"] = lam
    if restart_root is not None:
        scalars["restart_root_argument"] = restart_root

    snap = IterationSnapshot(
        "plcg",
        offset + a,
        abs(zeta),
        scalars,
        {k: frozen(vv) for k, vv in vecs.items() if k in needs and vv is not None},
        local_iter=a,
        segment=seg_index,
        restarted=restart_root is not None,
        H=SymTridiag(gamma[: a + 1], delta[: a + 1]),
        G=frozen(seg.G[: a + 2, : a + 2]),
    )
    notify(observers, snap)
