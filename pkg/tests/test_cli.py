import csv
import io

import numpy as np
import pytest

from pipecg.cli import COLUMNS, main, parse_diag, parse_methods, parse_problem, parse_shifts
from pipecg.cli import UsageError
from pipecg.problems import poisson_system
from pipecg.shifts import chebyshev_shifts

DIAG4 = """%%MatrixMarket matrix coordinate real symmetric
4 4 4
1 1 1
2 2 2
3 3 3
4 4 4
"""


def run_cli(tmp_path, *argv, name="out.csv"):
    out = tmp_path / name
    code = main([*argv, "-o", str(out), "--no-header-meta"])
    text = out.read_text() if out.exists() else ""
    return code, text


def rows_of(text):
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(io.StringIO("\n".join(lines))))


@pytest.fixture
def diag4(tmp_path):
    path = tmp_path / "diag4.mtx"
    path.write_text(DIAG4)
    return path


# ---- exit codes


def test_converged_exit_zero(tmp_path):
    code, text = run_cli(tmp_path, "solve", "--problem", "poisson:6x6", "--tol", "1e-8", "--maxit", "50")
    assert code == 0
    rows = rows_of(text)
    assert list(rows[0].keys()) == COLUMNS
    assert rows[-1]["event"] == "converged"
    assert float(rows[-1]["rec_res"]) / float(rows[0]["rec_res"]) < 1e-8


def test_max_iterations_exit_two(tmp_path):
    code, text = run_cli(tmp_path, "solve", "--problem", "poisson:10x10", "--maxit", "5")
    assert code == 2
    rows = rows_of(text)
    assert [int(r["iter"]) for r in rows] == list(range(6))
    assert rows[-1]["event"] == "max_iters"


def test_unrecovered_breakdown_exit_three(tmp_path, diag4):
    code, text = run_cli(tmp_path, "solve", "--problem", f"mm:{diag4}", "-l", "2",
                         "--shifts", "chebyshev:100,1000000", "--on-breakdown", "fail", "--maxit", "20")
    assert code == 3
    assert rows_of(text)[-1]["event"] == "breakdown"


def test_restart_policy_records_restart_rows(tmp_path, diag4):
    code, text = run_cli(tmp_path, "solve", "--problem", f"mm:{diag4}", "-l", "2",
                         "--shifts", "chebyshev:100,1000000", "--maxit", "20")
    assert code == 2
    rows = rows_of(text)
    assert "restart" in [r["event"] for r in rows]
    its = [int(r["iter"]) for r in rows]
    assert its == sorted(set(its))


@pytest.mark.parametrize("argv", [
    ["solve", "--problem", "poisson:abc"],
    ["solve", "--problem", "torus:3"],
    ["solve", "--problem", "mm:/nonexistent/file.mtx"],
    ["solve", "--problem", "poisson:4x4", "--shifts", "list:1,2", "-l", "3"],
    ["solve", "--problem", "poisson:4x4", "--method", "cg", "--precond", "jacobi"],
    ["solve", "--problem", "poisson:4x4", "--maxit", "0"],
    ["solve", "--problem", "poisson:4x4", "--tol", "-1"],
    ["solve", "--problem", "poisson:4x4", "--diag", "bogus"],
    ["compare", "--problem", "poisson:4x4", "--methods", "cg,gmres"],
    ["compare", "--problem", "poisson:4x4", "--methods", "plcg"],
    ["table1", "--problem", "poisson:4x4", "--ls", "0"],
    ["frobnicate"],
])
def test_usage_errors_exit_one(tmp_path, argv):
    code, _ = run_cli(tmp_path, *argv)
    assert code == 1


def test_malformed_matrix_market_exit_one(tmp_path):
    bad = tmp_path / "bad.mtx"
    bad.write_text("%%MatrixMarket matrix coordinate real general\n2 2 1\n1 1 oops\n")
    code, _ = run_cli(tmp_path, "solve", "--problem", f"mm:{bad}")
    assert code == 1


# ---- output


def test_header_meta_line(tmp_path):
    out = tmp_path / "m.csv"
    assert main(["solve", "--problem", "poisson:4x4", "--maxit", "3", "-o", str(out)]) == 2
    first = out.read_text().splitlines()[0]
    assert first.startswith("# pipecg ") and "generated" in first


def test_output_is_deterministic_without_meta(tmp_path):
    argv = ["compare", "--problem", "poisson:8x8", "--maxit", "12", "--diag", "all"]
    _, a = run_cli(tmp_path, *argv, name="a.csv")
    _, b = run_cli(tmp_path, *argv, name="b.csv")
    assert a == b and a


def test_compare_single_method_matches_solve(tmp_path):
    _, solo = run_cli(tmp_path, "solve", "--problem", "poisson:8x8", "--method", "plcg", "-l", "2",
                      "--maxit", "15", name="s.csv")
    _, comp = run_cli(tmp_path, "compare", "--problem", "poisson:8x8", "--methods", "plcg:2",
                      "--maxit", "15", name="c.csv")
    assert solo == comp


def test_compare_rows_per_method_and_monotone_iters(tmp_path):
    code, text = run_cli(tmp_path, "compare", "--problem", "poisson:8x8", "--methods", "cg,pcg,plcg:3",
                         "--maxit", "10")
    assert code == 2
    rows = rows_of(text)
    for method in ("cg", "pcg", "plcg"):
        its = [int(r["iter"]) for r in rows if r["method"] == method]
        assert its == list(range(11))
    assert {r["l"] for r in rows if r["method"] != "plcg"} == {""}
    assert {r["l"] for r in rows if r["method"] == "plcg"} == {"3"}


def test_compare_parallel_jobs_match_serial(tmp_path):
    argv = ["compare", "--problem", "poisson:8x8", "--methods", "cg,plcg:2", "--maxit", "10"]
    _, serial = run_cli(tmp_path, *argv, name="a.csv")
    _, par = run_cli(tmp_path, *argv, "--jobs", "2", name="b.csv")
    assert serial == par


def test_cg_ginv_column_is_one(tmp_path):
    _, text = run_cli(tmp_path, "solve", "--problem", "poisson:6x6", "--method", "cg", "--maxit", "5")
    assert {r["ginv_maxnorm"] for r in rows_of(text)} == {"1.0"}


def test_diag_none_leaves_columns_empty(tmp_path):
    _, text = run_cli(tmp_path, "solve", "--problem", "poisson:6x6", "--maxit", "5", "--diag", "none")
    for r in rows_of(text):
        assert r["true_res"] == r["gap_f"] == r["ginv_maxnorm"] == ""
        assert r["rec_res"] != ""


def test_true_residual_column_matches_recursive_at_start(tmp_path):
    _, text = run_cli(tmp_path, "solve", "--problem", "poisson:6x6", "--maxit", "5", "--diag", "true")
    first = rows_of(text)[0]
    assert float(first["true_res"]) == pytest.approx(float(first["rec_res"]), rel=1e-14)


def test_bound_every_controls_ritz_column(tmp_path):
    _, text = run_cli(tmp_path, "solve", "--problem", "poisson:12x12", "--maxit", "9", "--diag", "bound",
                      "--bound-every", "4")
    filled = [int(r["iter"]) for r in rows_of(text) if r["ritz_bound"]]
    assert filled == [0, 4, 8, 9]


def test_table1_single_cell(tmp_path):
    code, text = run_cli(tmp_path, "table1", "--problem", "poisson:10x10", "--ls", "2", "--js", "8")
    assert code == 0
    rows = rows_of(text)
    assert len(rows) == 1
    assert list(rows[0].keys()) == ["l", "j", "ginv_maxnorm", "ritz_bound", "lemma3_bound"]
    assert float(rows[0]["ritz_bound"]) >= float(rows[0]["ginv_maxnorm"])


def test_table1_monomial_column(tmp_path):
    _, text = run_cli(tmp_path, "table1", "--problem", "poisson:10x10", "--ls", "1", "--js", "5",
                      "--shifts", "monomial")
    rows = rows_of(text)
    assert "monomial_bound" in rows[0]
    # with l = 1 and zero shifts both bounds are 1/min|theta|
    assert float(rows[0]["monomial_bound"]) == pytest.approx(float(rows[0]["lemma3_bound"]), rel=1e-14)


# ---- config file


def test_config_supplies_defaults_and_flags_override(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# small run\nproblem = poisson:6x6\nmaxit = 3\nmethod=cg\n")
    _, text = run_cli(tmp_path, "solve", "--config", str(cfg), name="a.csv")
    rows = rows_of(text)
    assert len(rows) == 4 and rows[0]["method"] == "cg"
    _, text = run_cli(tmp_path, "solve", "--config", str(cfg), "--maxit", "5", name="b.csv")
    assert len(rows_of(text)) == 6


@pytest.mark.parametrize("body", ["bogus = 1\n", "method = gmres\n", "no_header_meta = maybe\n",
                                  "just a line\n"])
def test_bad_config_exit_one(tmp_path, body):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(body)
    code, _ = run_cli(tmp_path, "solve", "--config", str(cfg))
    assert code == 1


# ---- parsing helpers


def test_parse_problem_square_shorthand():
    assert parse_problem("poisson:5", "uniform_inv_sqrt_n").n == 25


def test_parse_shifts_default_uses_interval():
    s = poisson_system(4, 4)
    lo, hi = s.spectral_interval
    got = parse_shifts(None, 3, s, "leja").as_array()
    np.testing.assert_array_equal(got, chebyshev_shifts(3, lo, hi, "leja").as_array())


def test_parse_shifts_plain_list():
    s = poisson_system(4, 4)
    assert parse_shifts("0.5,1.5", 2, s, "leja").as_array().tolist() == [0.5, 1.5]


def test_parse_diag_and_methods():
    assert parse_diag("all") == {"true", "gap", "ginv", "bound"}
    assert parse_diag("true,none") == set()
    assert parse_methods("cg, plcg:4") == [("cg", None), ("plcg", 4)]
    with pytest.raises(UsageError):
        parse_methods("plcg:0")
