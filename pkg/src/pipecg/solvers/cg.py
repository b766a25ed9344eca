"""Classic (Hestenes-Stiefel) conjugate gradients."""

from __future__ import annotations

import math

from ..linalg import dot, spmv
from ..problems import LinearSystem
from .base import (
    IndefiniteMatrixError,
    IterationSnapshot,
    SolveReport,
    SolverConfig,
    as_observers,
    frozen,
    notify,
    subscriptions,
)


def cg_solve(system: LinearSystem, cfg: SolverConfig, observer=None) -> SolveReport:
    """Run at most ``cfg.max_iters`` solution updates of classic CG.

    The stopping test sqrt((r_i, r_i)) / ||r_0|| < tol is evaluated before the
    update of iteration i. Observers see x_i, r_i, p_i and s_i = A p_i.
    """
    observers = as_observers(observer)
    needs = subscriptions(observers)
    A, b = system.A, system.b

    x = system.x0.copy()
    r = b - spmv(A, x)
    p = r
    rr = dot(r, r)
    r0 = math.sqrt(rr)
    hist = {"rec_res": [], "alpha": [], "beta": [0.0]}
    converged = False
    i = 0
    while True:
        s = spmv(A, p)
        sp = dot(s, p)
        rec = math.sqrt(rr)
        hist["rec_res"].append(rec)
        if observers:
            vecs = {"x": x, "r": r, "p": p, "s": s}
            snap = IterationSnapshot(
                "cg",
                i,
                rec,
                {"beta": hist["beta"][-1]},
                {k: frozen(v) for k, v in vecs.items() if k in needs},
                local_iter=i,
            )
            notify(observers, snap)
        if r0 == 0.0 or rec / r0 < cfg.tol:
            converged = True
            break
        if i >= cfg.max_iters or rr == 0.0:
            break
        if not sp > 0:
            raise IndefiniteMatrixError(i, sp)
        alpha = rr / sp
        hist["alpha"].append(alpha)
        x = x + alpha * p
        r = r - alpha * s
        rr_next = dot(r, r)
        beta = rr_next / rr
        hist["beta"].append(beta)
        p = r + beta * p
        rr = rr_next
        i += 1
    return SolveReport("cg", x, converged, i, r0, history=hist)
