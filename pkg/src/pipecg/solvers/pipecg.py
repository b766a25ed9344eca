"""Length-one pipelined CG (Ghysels-Vanroose recurrences)."""

from __future__ import annotations

import math

import numpy as np

from ..linalg import dot, spmv
from ..problems import LinearSystem
from .base import (
    BreakdownError,
    IterationSnapshot,
    SolveReport,
    SolverConfig,
    as_observers,
    frozen,
    notify,
    subscriptions,
)


def pcg_solve(system: LinearSystem, cfg: SolverConfig, observer=None) -> SolveReport:
    """Pipelined CG with auxiliary recurrences w = Ar, s = Ap, z = As.

    Observers see x_i, r_i, w_i and the freshly recurred p_i, s_i, z_i of
    iteration i (before the x/r/w update).
    """
    observers = as_observers(observer)
    needs = subscriptions(observers)
    A, b = system.A, system.b

    x = system.x0.copy()
    r = b - spmv(A, x)
    w = spmv(A, r)
    zero = np.zeros_like(r)
    z = s = p = zero
    r0 = math.sqrt(dot(r, r))
    hist = {"rec_res": [], "alpha": [], "beta": []}
    converged = False
    gamma_prev = alpha_prev = None
    i = 0
    while True:
        gamma = dot(r, r)
        delta = dot(w, r)
        q = spmv(A, w)
        rec = math.sqrt(gamma)
        beta = gamma / gamma_prev if i > 0 else 0.0
        z = q + beta * z
        s = w + beta * s
        p = r + beta * p
        hist["rec_res"].append(rec)
        hist["beta"].append(beta)
        if observers:
            vecs = {"x": x, "r": r, "w": w, "p": p, "s": s, "z": z}
            snap = IterationSnapshot(
                "pcg",
                i,
                rec,
                {"beta": beta, "gamma": gamma, "delta": delta},
                {k: frozen(v) for k, v in vecs.items() if k in needs},
                local_iter=i,
            )
            notify(observers, snap)
        if r0 == 0.0 or rec / r0 < cfg.tol:
            converged = True
            break
        if i >= cfg.max_iters or gamma == 0.0:
            break
        if i > 0:
            denom = delta / gamma - beta / alpha_prev
            if denom == 0.0 or not math.isfinite(denom):
                raise BreakdownError(i, f"alpha denominator is {denom!r}")
            alpha = 1.0 / denom
        else:
            if delta == 0.0:
                raise BreakdownError(i, "(w_0, r_0) = 0")
            alpha = gamma / delta
        hist["alpha"].append(alpha)
        x = x + alpha * p
        r = r - alpha * s
        w = w - alpha * z
        gamma_prev, alpha_prev = gamma, alpha
        i += 1
    return SolveReport("pcg", x, converged, i, r0, history=hist)
