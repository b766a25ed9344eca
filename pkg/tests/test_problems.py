import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pipecg.linalg import SparseMatrixCsr, norm2, spmv
from pipecg.problems import (
    MatrixMarketError,
    load_matrix_market,
    make_system,
    poisson2d,
    poisson2d_eigenvalues,
    poisson_system,
    rhs_from_solution,
    spectral_interval_poisson,
)


def test_poisson_1x1():
    assert poisson2d(1, 1).to_dense().tolist() == [[4.0]]


def test_poisson_2x2_by_hand():
    # nodes (0,0) (1,0) (0,1) (1,1), x fastest
    expected = np.array([
        [4, -1, -1, 0],
        [-1, 4, 0, -1],
        [-1, 0, 4, -1],
        [0, -1, -1, 4],
    ], dtype=float)
    A = poisson2d(2, 2)
    assert np.array_equal(A.to_dense(), expected)
    assert A.nnz == 12


def test_poisson_ordering_is_x_fastest():
    D = poisson2d(3, 2).to_dense()
    assert D[0, 1] == -1.0  # x-neighbour
    assert D[0, 3] == -1.0  # y-neighbour, one row of 3 later
    assert D[2, 3] == 0.0  # wrap-around is not a neighbour


def test_poisson_invalid():
    with pytest.raises(ValueError):
        poisson2d(0, 3)


def test_poisson_200_spectrum_by_formula():
    A = poisson2d(200, 200)
    assert A.n == 40000
    h = 1 / 201
    lo, hi = spectral_interval_poisson(200, 200, exact=True)
    assert lo == pytest.approx(4 - 4 * math.cos(math.pi * h), rel=1e-12)
    assert hi == pytest.approx(4 + 4 * math.cos(math.pi * h), rel=1e-12)
    assert 0 < lo < hi < 8


def test_poisson_eigen_formula_against_dense():
    np.testing.assert_allclose(poisson2d_eigenvalues(4, 3), np.linalg.eigvalsh(poisson2d(4, 3).to_dense()),
                               atol=1e-12)


def test_rows_have_diag_four_and_neighbour_sums():
    D = poisson2d(5, 4).to_dense()
    assert np.all(np.diag(D) == 4)
    off = D.sum(axis=1) - 4
    assert set(off.tolist()) <= {-2.0, -3.0, -4.0}
    assert np.array_equal(D, D.T)


def test_rhs_identity_uniform():
    I = SparseMatrixCsr.from_dense(np.eye(4))
    b, x = rhs_from_solution(I, "uniform_inv_sqrt_n")
    assert x.tolist() == [0.5] * 4
    assert np.array_equal(b, x)


def test_rhs_poisson_ones():
    b, x = rhs_from_solution(poisson2d(2, 2), "ones")
    assert b.tolist() == [2.0] * 4
    assert x.tolist() == [1.0] * 4


def test_rhs_poisson_200_unit_solution():
    s = poisson_system(200, 200)
    assert norm2(s.x_true) == pytest.approx(1.0, rel=1e-13)
    assert np.array_equal(s.b, spmv(s.A, s.x_true))
    assert s.x0.tolist() == [0.0] * s.n
    assert s.spectral_interval == (0.0, 8.0)


def test_rhs_unknown_mode():
    with pytest.raises(ValueError):
        rhs_from_solution(poisson2d(2, 2), "random")


def test_spectral_interval():
    assert spectral_interval_poisson(17, 3) == (0.0, 8.0)
    assert spectral_interval_poisson(1, 1, exact=True) == pytest.approx((4.0, 4.0))
    lo, hi = spectral_interval_poisson(3, 3, exact=True)
    assert lo == pytest.approx(4 - 2 * math.sqrt(2), rel=1e-14)
    assert hi == pytest.approx(4 + 2 * math.sqrt(2), rel=1e-14)


def test_make_system_checks_lengths():
    s = make_system(poisson2d(2, 3), "ones", (0.0, 8.0))
    assert s.n == 6


# ---- Matrix Market


def write(tmp_path, text, name="m.mtx"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_mm_symmetric_expanded(tmp_path):
    p = write(tmp_path, "%%MatrixMarket matrix coordinate real symmetric\n% comment\n2 2 3\n1 1 4\n2 2 4\n2 1 -1\n")
    assert load_matrix_market(p).to_dense().tolist() == [[4, -1], [-1, 4]]


def test_mm_non_square(tmp_path):
    p = write(tmp_path, "%%MatrixMarket matrix coordinate real general\n2 3 1\n1 1 1\n")
    with pytest.raises(MatrixMarketError):
        load_matrix_market(p)


def test_mm_duplicates_summed(tmp_path):
    p = write(tmp_path, "%%MatrixMarket matrix coordinate real symmetric\n1 1 2\n1 1 2\n1 1 2\n")
    A = load_matrix_market(p)
    assert A.to_dense().tolist() == [[4.0]]
    assert A.nnz == 1


def test_mm_general_nonsymmetric_rejected(tmp_path):
    p = write(tmp_path, "%%MatrixMarket matrix coordinate real general\n2 2 3\n1 1 1\n2 2 1\n1 2 0.5\n")
    with pytest.raises(MatrixMarketError):
        load_matrix_market(p)


def test_mm_general_symmetric_accepted(tmp_path):
    p = write(tmp_path, "%%MatrixMarket matrix coordinate real general\n2 2 4\n1 1 3\n2 2 3\n1 2 1\n2 1 1\n")
    assert load_matrix_market(p).to_dense().tolist() == [[3, 1], [1, 3]]


def test_mm_parse_error_names_line(tmp_path):
    p = write(tmp_path, "%%MatrixMarket matrix coordinate real symmetric\n2 2 2\n1 1 4\n2 x 4\n")
    with pytest.raises(MatrixMarketError) as exc:
        load_matrix_market(p)
    assert exc.value.line == 4


def test_mm_bad_header(tmp_path):
    p = write(tmp_path, "%%MatrixMarket matrix array real general\n2 2\n1\n0\n0\n1\n")
    with pytest.raises(MatrixMarketError):
        load_matrix_market(p)


def test_mm_roundtrip_poisson(tmp_path):
    A = poisson2d(3, 2)
    D = A.to_dense()
    rows, cols = np.nonzero(np.tril(D))
    lines = [f"{i + 1} {j + 1} {float(D[i, j])!r}" for i, j in zip(rows, cols)]
    text = f"%%MatrixMarket matrix coordinate real symmetric\n{A.n} {A.n} {len(lines)}\n" + "\n".join(lines) + "\n"
    B = load_matrix_market(write(tmp_path, text))
    assert np.array_equal(B.to_dense(), D)


@settings(max_examples=36, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6))
def test_property_poisson_spectrum_inside_0_8(nx, ny):
    ev = np.linalg.eigvalsh(poisson2d(nx, ny).to_dense())
    assert ev.min() > 0 and ev.max() < 8
