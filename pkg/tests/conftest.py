import numpy as np
import pytest

from pipecg.diagnostics import TrueResidualObserver
from pipecg.problems import poisson_system
from pipecg.solvers import SolverConfig, solve

_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """record(criterion, ok, detail): prints a PASS/FAIL line, then asserts."""

    def record(criterion, ok, detail=""):
        line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        print(line)
        _VERDICTS.append(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)


def run_with_true_residual(method, system, cfg):
    obs = TrueResidualObserver(system)
    report = solve(method, system, cfg, obs)
    return report, obs.trace["true_res"]


@pytest.fixture(scope="session")
def poisson200():
    return poisson_system(200, 200)


@pytest.fixture(scope="session")
def poisson50():
    return poisson_system(50, 50)


STAGNATION_METHODS = [("cg", 1), ("pcg", 1), ("plcg", 1), ("plcg", 2), ("plcg", 3), ("plcg", 5)]


@pytest.fixture(scope="session")
def stagnation_runs(poisson200):
    """500 iterations, tol 0, default shifts; {label: (report, true_res)}."""
    out = {}
    for method, l in STAGNATION_METHODS:
        label = method if method != "plcg" else f"p({l})"
        out[label] = run_with_true_residual(method, poisson200, SolverConfig(500, 0.0, l))
    return out


@pytest.fixture(scope="session")
def stabilized_runs(poisson200):
    """Stabilized p(l)-CG runs to stagnation, with the basis-gap observer."""
    from pipecg.diagnostics import PlcgBasisGapObserver

    out = {}
    for l in (1, 2, 3, 5, 10):
        basis = PlcgBasisGapObserver(poisson200)
        true = TrueResidualObserver(poisson200)
        cfg = SolverConfig(1000, 0.0, l, recurrence_mode="stabilized")
        report = solve("plcg", poisson200, cfg, [basis, true])
        out[l] = (report, basis.trace, true.trace["true_res"])
    return out


def random_spd(n, seed, cond=10.0):
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    eig = np.geomspace(1.0, cond, n)
    M = (Q * eig) @ Q.T
    return (M + M.T) / 2
