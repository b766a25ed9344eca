"""Command-line front end: ``pipecg solve | compare | table1``.

Exit codes: 0 converged, 1 usage or I/O error, 2 tolerance not met (iteration
limit reached or Krylov space exhausted), 3 unrecovered square-root breakdown.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import io
import math
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional

from . import __version__
from .diagnostics import (
    PlcgBasisGapObserver,
    PlcgResidualGapObserver,
    basis_transform_bound,
    cg_gap_observer,
    pcg_gap_observer,
    propagation_norms,
    table1_grid,
    true_residual_observer,
)
from .problems import MatrixMarketError, load_matrix_market, make_system, poisson_system, RHS_MODES
from .shifts import SHIFT_ORDERS, ShiftSchedule, chebyshev_shifts, monomial_shifts
from .solvers import BreakdownError, SolverConfig, SolverError, jacobi_preconditioner, solve

EXIT_OK, EXIT_USAGE, EXIT_MAXIT, EXIT_BREAKDOWN = 0, 1, 2, 3

COLUMNS = ["iter", "method", "l", "mode", "rec_res", "true_res", "gap_f", "gap_resid",
           "ginv_maxnorm", "ritz_bound", "event"]
DIAG_CHOICES = ("true", "gap", "ginv", "bound")
DEFAULT_METHODS = "cg,pcg,plcg:1,plcg:2,plcg:3,plcg:5"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- parsing helpers


def parse_problem(text: str, rhs: str):
    kind, _, arg = text.partition(":")
    if kind == "poisson":
        m = re.fullmatch(r"(\d+)(?:x(\d+))?", arg)
        if not m:
            raise UsageError(f"bad poisson size {arg!r}; expected NXxNY")
        nx = int(m.group(1))
        ny = int(m.group(2) or nx)
        return poisson_system(nx, ny, rhs)
    if kind == "mm":
        if not arg:
            raise UsageError("mm: needs a file path")
        return make_system(load_matrix_market(arg), rhs)
    raise UsageError(f"unknown problem {text!r}; use poisson:NXxNY or mm:PATH")


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"bad number list {text!r}") from None


def parse_shifts(text: Optional[str], l: int, system, order: str) -> ShiftSchedule:
    if text is None or text == "chebyshev":
        if system.spectral_interval is None:
            if text is None:
                return monomial_shifts(l)
            raise UsageError("no known spectral interval; use --shifts chebyshev:LO,HI")
        lo, hi = system.spectral_interval
        return chebyshev_shifts(l, lo, hi, order)
    kind, _, arg = text.partition(":")
    if kind == "chebyshev":
        bounds = _floats(arg)
        if len(bounds) != 2:
            raise UsageError("chebyshev shifts need two bounds: chebyshev:LO,HI")
        try:
            return chebyshev_shifts(l, bounds[0], bounds[1], order)
        except ValueError as e:
            raise UsageError(str(e)) from None
    if kind == "monomial":
        return monomial_shifts(l)
    values = _floats(arg if kind == "list" else text)
    if len(values) != l:
        raise UsageError(f"{len(values)} shifts given for pipeline depth {l}")
    return ShiftSchedule(values, "user")


def parse_diag(text: str) -> set[str]:
    items = {t.strip() for t in text.split(",") if t.strip()}
    if "none" in items:
        return set()
    if "all" in items:
        return set(DIAG_CHOICES)
    bad = items - set(DIAG_CHOICES)
    if bad:
        raise UsageError(f"unknown diagnostics {sorted(bad)}; choose from {DIAG_CHOICES} or all")
    return items


def parse_methods(text: str) -> list[tuple[str, Optional[int]]]:
    out = []
    for item in text.split(","):
        item = item.strip()
        name, _, depth = item.partition(":")
        if name not in ("cg", "pcg", "plcg"):
            raise UsageError(f"unknown method {item!r}")
        if name == "plcg":
            if not depth.isdigit() or int(depth) < 1:
                raise UsageError(f"plcg needs a depth, e.g. plcg:2 (got {item!r})")
            out.append((name, int(depth)))
        else:
            out.append((name, None))
    return out


def read_config(path: str) -> dict[str, str]:
    """Line-oriented key=value file; '#' starts a comment."""
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e}") from None
    for no, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{no}: expected key=value")
        out[key.strip().lstrip("-").replace("-", "_")] = value.strip()
    return out


# ---------------------------------------------------------------- runs


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, str):
        return x
    if isinstance(x, int):
        return str(x)
    x = float(x)
    return "" if math.isnan(x) else repr(x)


def _solver_config(args, method, l, system):
    precond = None
    if args.precond == "jacobi":
        if method != "plcg":
            raise UsageError("--precond jacobi is only supported with plcg")
        precond = jacobi_preconditioner(system.A)
    shifts = parse_shifts(args.shifts, l, system, args.shift_order) if method == "plcg" else None
    policy = {"restart": "restart_on_breakdown", "fail": "fail_on_breakdown"}[args.on_breakdown]
    return SolverConfig(
        max_iters=args.maxit, tol=args.tol, pipeline_depth=l or 1, shifts=shifts,
        recurrence_mode=args.mode, restart_policy=policy, preconditioner=precond,
    )


class _RowObserver:
    needs = frozenset()

    def __init__(self):
        self.rows = []  # (iter, rec_res, restarted)

    def __call__(self, snap):
        self.rows.append((snap.iter, snap.rec_res, snap.restarted))


def run_method(system, method: str, l: Optional[int], args) -> tuple[list[list[str]], int, str]:
    """One solver run; returns CSV rows, exit status and a message."""
    cfg = _solver_config(args, method, l, system)
    diag = parse_diag(args.diag)
    rows_obs = _RowObserver()
    observers = [rows_obs]
    gap_obs = None
    basis = None
    if method == "cg" and diag & {"true", "gap"}:
        gap_obs = cg_gap_observer(system) if "gap" in diag else true_residual_observer(system)
    elif method == "pcg" and diag & {"true", "gap"}:
        gap_obs = pcg_gap_observer(system) if "gap" in diag else true_residual_observer(system)
    elif method == "plcg" and diag & {"true", "gap"}:
        if "gap" in diag:
            basis = PlcgBasisGapObserver(system, cfg.preconditioner)
            gap_obs = PlcgResidualGapObserver(system, basis)
            observers.append(basis)
        else:
            gap_obs = true_residual_observer(system)
    if gap_obs is not None:
        observers.append(gap_obs)

    status, message, report, fail_iter = EXIT_OK, "", None, None
    try:
        report = solve(method, system, cfg, observers)
    except BreakdownError as e:
        status, message, fail_iter = EXIT_BREAKDOWN, str(e), e.iteration
    except SolverError as e:
        status, message, fail_iter = EXIT_BREAKDOWN, str(e), getattr(e, "iteration", None)
    if report is not None:
        status = EXIT_OK if report.converged else EXIT_MAXIT
        if report.converged:
            message = f"{method}: converged after {report.iterations} iterations"
        elif report.stop_reason == "exhausted":
            message = f"{method}: Krylov space exhausted after {report.iterations} iterations"
        else:
            message = f"{method}: reached max iterations ({report.iterations})"

    prop = None
    if report is not None and "ginv" in diag:
        prop = propagation_norms(report)
    l_field = l if method == "plcg" else None
    mode_field = args.mode if method == "plcg" else None
    rows = []
    last = len(rows_obs.rows) - 1
    for k, (it, rec, restarted) in enumerate(rows_obs.rows):
        tr = gf = gr = ginv = bound = None
        if gap_obs is not None:
            tr = gap_obs.trace.value("true_res", it)
            if method == "plcg" and basis is not None:
                gf = basis.trace.value("gap_v", it)
                gr = gap_obs.trace.value("gap_resid", it)
            else:
                gf = gr = gap_obs.trace.value("gap_f", it)
        if prop is not None:
            ginv = prop.value(it)
        if report is not None and method == "plcg" and "bound" in diag and (
                it % args.bound_every == 0 or k == last):
            bound = _row_bound(report, it)
        event = "restart" if restarted else ""
        if k == last and report is not None:
            event = (event + ";" if event else "") + report.stop_reason
        rows.append([it, method, l_field, mode_field, rec, tr, gf, gr, ginv, bound, event])
    if fail_iter is not None:
        rows.append([fail_iter, method, l_field, mode_field, None, None, None, None, None, None,
                     "breakdown"])
    return [[_fmt(v) for v in r] for r in rows], status, message


def _row_bound(report, it: int) -> Optional[float]:
    for seg in reversed(report.segments):
        if seg.offset <= it:
            a = it - seg.offset
            if a + 1 > seg.n_cols:
                return None
            return basis_transform_bound(seg.H(a + 1), seg.shifts, report.pipeline_depth)
    return None


def _run_task(task):
    system, method, l, args = task
    return run_method(system, method, l, args)


# ---------------------------------------------------------------- output


def _open_out(path: str):
    if path in (None, "-"):
        return sys.stdout, False
    try:
        return open(path, "w", newline=""), True
    except OSError as e:
        raise UsageError(f"cannot write {path}: {e}") from None


def write_csv(args, header: list[str], rows: list[list[str]]):
    buf = io.StringIO()
    if not args.no_header_meta:
        stamp = _dt.datetime.now(_dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
        buf.write(f"# pipecg {__version__} generated {stamp}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    out, close = _open_out(args.output)
    try:
        out.write(buf.getvalue())
    finally:
        if close:
            out.close()


# ---------------------------------------------------------------- commands


def cmd_solve(args) -> int:
    system = parse_problem(args.problem, args.rhs)
    l = args.l if args.method == "plcg" else None
    rows, status, message = run_method(system, args.method, l, args)
    write_csv(args, COLUMNS, rows)
    print(message, file=sys.stderr)
    return status


def cmd_compare(args) -> int:
    system = parse_problem(args.problem, args.rhs)
    methods = parse_methods(args.methods)
    tasks = [(system, m, l, args) for m, l in methods]
    for _, m, l, _ in tasks:  # validate every config before running anything
        _solver_config(args, m, l, system)
    if args.jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_run_task, tasks))
    else:
        results = [_run_task(t) for t in tasks]
    rows, status = [], EXIT_OK
    for r, st, message in results:
        rows.extend(r)
        status = max(status, st)
        print(message, file=sys.stderr)
    write_csv(args, COLUMNS, rows)
    return status


def cmd_table1(args) -> int:
    system = parse_problem(args.problem, args.rhs)
    l_values = [int(v) for v in _floats(args.ls)]
    j_values = [int(v) for v in _floats(args.js)]
    if not l_values or not j_values or min(l_values) < 1 or min(j_values) < 1:
        raise UsageError("--ls and --js need positive integers")
    policy = {"restart": "restart_on_breakdown", "fail": "fail_on_breakdown"}[args.on_breakdown]
    shifts_by_l = {l: parse_shifts(args.shifts, l, system, args.shift_order) for l in l_values}
    try:
        table = table1_grid(system, l_values, j_values, shifts_by_l.__getitem__, policy, args.jobs)
    except BreakdownError as e:
        print(str(e), file=sys.stderr)
        return EXIT_BREAKDOWN
    monomial = all(s.basis_kind == "monomial" for s in shifts_by_l.values())
    header = ["l", "j", "ginv_maxnorm", "ritz_bound", "lemma3_bound"]
    if monomial:
        header.append("monomial_bound")
    rows = []
    for c in sorted(table.cells, key=lambda c: (c.l, c.j)):
        row = [c.l, c.j, c.ginv_maxnorm, c.ritz_bound, c.lemma3_bound]
        if monomial:
            row.append(c.monomial_bound)
        rows.append([_fmt(v) for v in row])
    write_csv(args, header, rows)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _common(p: argparse.ArgumentParser, problem_default: str):
    p.add_argument("--problem", default=problem_default,
                   help="poisson:NXxNY or mm:PATH (default %(default)s)")
    p.add_argument("--rhs", default="uniform_inv_sqrt_n", choices=RHS_MODES,
                   help="manufactured solution for b = A x_true")
    p.add_argument("--shifts", default=None,
                   help="chebyshev[:LO,HI] | monomial | list:S0,S1,... "
                        "(default: chebyshev on the problem's interval)")
    p.add_argument("--shift-order", default="leja", choices=SHIFT_ORDERS,
                   help="ordering of Chebyshev shifts (default %(default)s)")
    p.add_argument("--on-breakdown", default="restart", choices=("restart", "fail"))
    p.add_argument("--output", "-o", default="-", help="CSV destination (default stdout)")
    p.add_argument("--config", default=None, help="key=value file; flags override it")
    p.add_argument("--no-header-meta", action="store_true",
                   help="omit the timestamp comment line")
    p.add_argument("--jobs", type=int, default=1, help="parallel runs (compare, table1)")


def _run_options(p: argparse.ArgumentParser):
    p.add_argument("--tol", type=float, default=0.0, help="relative residual tolerance")
    p.add_argument("--maxit", type=int, default=500, help="max solution updates")
    p.add_argument("--mode", default="standard", choices=("standard", "stabilized"))
    p.add_argument("--precond", default="none", choices=("none", "jacobi"))
    p.add_argument("--diag", default="true,gap,ginv",
                   help="comma list of true,gap,ginv,bound | all | none")
    p.add_argument("--bound-every", type=int, default=10,
                   help="evaluate ritz_bound every N iterations (and at the last)")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = _Parser(prog="pipecg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"pipecg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("solve", help="run one solver and write a per-iteration CSV")
    _common(ps, "poisson:200x200")
    _run_options(ps)
    ps.add_argument("--method", default="plcg", choices=("cg", "pcg", "plcg"))
    ps.add_argument("-l", "--l", type=int, default=1, help="pipeline depth for plcg")
    ps.set_defaults(func=cmd_solve)

    pc = sub.add_parser("compare", help="run several methods on one problem")
    _common(pc, "poisson:200x200")
    _run_options(pc)
    pc.add_argument("--methods", default=DEFAULT_METHODS,
                    help="comma list of cg, pcg, plcg:L (default %(default)s)")
    pc.set_defaults(func=cmd_compare)

    pt = sub.add_parser("table1", help="propagation norms and bounds on an (l, j) grid")
    _common(pt, "poisson:200x200")
    pt.add_argument("--ls", default="1,2,3,4,5,10", help="pipeline depths")
    pt.add_argument("--js", default="10,50,100,200,400", help="iteration indices")
    pt.set_defaults(func=cmd_table1)
    return parser, {"solve": ps, "compare": pc, "table1": pt}


def _apply_config(argv, subparsers):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    pre.add_argument("command", nargs="?")
    known, _ = pre.parse_known_args(argv)
    if not known.config or known.command not in subparsers:
        return
    sp = subparsers[known.command]
    dests = {a.dest: a for a in sp._actions}
    values = {}
    for key, raw in read_config(known.config).items():
        if key in ("config", "help") or key not in dests:
            raise UsageError(f"unknown config key {key!r}")
        action = dests[key]
        if isinstance(action, argparse._StoreTrueAction):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"config key {key!r} needs a boolean")
            values[key] = raw.lower() in ("true", "1", "yes")
        elif action.choices is not None and raw not in action.choices:
            raise UsageError(f"config {key}={raw!r}: choose from {list(action.choices)}")
        else:
            values[key] = raw  # argparse converts string defaults with the action's type
    sp.set_defaults(**values)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subparsers = build_parser()
    try:
        _apply_config(argv, subparsers)
        args = parser.parse_args(argv)
        if getattr(args, "maxit", 1) < 1 or getattr(args, "bound_every", 1) < 1 or args.jobs < 1:
            raise UsageError("--maxit, --bound-every and --jobs must be >= 1")
        if getattr(args, "tol", 0.0) < 0:
            raise UsageError("--tol must be >= 0")
        if getattr(args, "l", 1) < 1:
            raise UsageError("-l must be >= 1")
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (MatrixMarketError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
