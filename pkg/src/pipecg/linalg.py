"""Dense/sparse kernels and small structured-matrix helpers.

Every reduction here runs in a fixed, strictly sequential order (ascending
index, no pairwise or compensated summation) so that a run on the same input
is bit-reproducible. The kernels are compiled with numba without fastmath,
which keeps LLVM from reassociating the floating-point additions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np
import scipy.linalg

SINGULAR_DIAG_THRESHOLD = 1e-300


class DimensionError(ValueError):
    pass


class SingularMatrixError(ArithmeticError):
    """Raised when a triangular matrix has a (numerically) zero pivot."""

    def __init__(self, index: int, value: float):
        super().__init__(f"zero or denormal diagonal entry {value!r} at index {index}")
        self.index = index
        self.value = value


# ---------------------------------------------------------------------------
# compiled kernels


@numba.njit(cache=True)
def _csr_matvec(row_ptr, col_idx, vals, x, out):
    n = row_ptr.shape[0] - 1
    for i in range(n):
        s = 0.0
        for k in range(row_ptr[i], row_ptr[i + 1]):
            s += vals[k] * x[col_idx[k]]
        out[i] = s


@numba.njit(cache=True)
def _seq_dot(x, y):
    s = 0.0
    for i in range(x.shape[0]):
        s += x[i] * y[i]
    return s


@numba.njit(cache=True)
def _upper_tri_inverse(T, out):
    # column-wise back substitution, column k only touches T[:k+1, :k+1]
    n = T.shape[0]
    for k in range(n):
        out[k, k] = 1.0 / T[k, k]
        for i in range(k - 1, -1, -1):
            s = 0.0
            for m in range(i + 1, k + 1):
                s += T[i, m] * out[m, k]
            out[i, k] = -s / T[i, i]


# ---------------------------------------------------------------------------
# sparse matrix


@dataclass(frozen=True)
class SparseMatrixCsr:
    """Square, symmetric matrix in CSR form with the full (not half) pattern.

    Column indices are sorted within each row; `spmv` sums each row in that
    ascending order.
    """

    n: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    vals: np.ndarray
    mu: int = field(init=False)

    def __post_init__(self):
        row_ptr = np.ascontiguousarray(self.row_ptr, dtype=np.int64)
        col_idx = np.ascontiguousarray(self.col_idx, dtype=np.int64)
        vals = np.ascontiguousarray(self.vals, dtype=np.float64)
        if row_ptr.shape != (self.n + 1,) or row_ptr[0] != 0:
            raise ValueError("row_ptr must have n+1 entries starting at 0")
        if np.any(np.diff(row_ptr) < 0):
            raise ValueError("row_ptr must be nondecreasing")
        if col_idx.shape != vals.shape or col_idx.shape[0] != row_ptr[-1]:
            raise ValueError("col_idx/vals length must equal row_ptr[-1]")
        if col_idx.size and (col_idx.min() < 0 or col_idx.max() >= self.n):
            raise ValueError("column index out of range")
        if not np.all(np.isfinite(vals)):
            raise ValueError("matrix entries must be finite")
        unsorted = np.diff(col_idx) <= 0
        boundaries = row_ptr[1:-1]
        unsorted[boundaries[(boundaries > 0) & (boundaries < col_idx.size)] - 1] = False
        if unsorted.any():
            row = int(np.searchsorted(row_ptr, np.flatnonzero(unsorted)[0], side="right") - 1)
            raise ValueError(f"row {row}: column indices must be strictly increasing")
        object.__setattr__(self, "row_ptr", row_ptr)
        object.__setattr__(self, "col_idx", col_idx)
        object.__setattr__(self, "vals", vals)
        object.__setattr__(self, "mu", int(np.diff(row_ptr).max()) if self.n else 0)
        if not self._is_symmetric():
            raise ValueError("matrix is not exactly symmetric")

    @classmethod
    def from_scipy(cls, M) -> "SparseMatrixCsr":
        import scipy.sparse as sp

        M = sp.csr_matrix(M)
        if M.shape[0] != M.shape[1]:
            raise ValueError(f"matrix must be square, got {M.shape}")
        M.sum_duplicates()
        M.sort_indices()
        return cls(M.shape[0], M.indptr, M.indices, M.data)

    @classmethod
    def from_dense(cls, D) -> "SparseMatrixCsr":
        import scipy.sparse as sp

        return cls.from_scipy(sp.csr_matrix(np.asarray(D, dtype=np.float64)))

    def to_scipy(self):
        import scipy.sparse as sp

        return sp.csr_matrix((self.vals, self.col_idx, self.row_ptr), shape=(self.n, self.n))

    def to_dense(self) -> np.ndarray:
        return self.to_scipy().toarray()

    @property
    def nnz(self) -> int:
        return int(self.row_ptr[-1])

    def diagonal(self) -> np.ndarray:
        return self.to_scipy().diagonal()

    def max_abs_row_sum(self) -> float:
        return float(np.max(np.add.reduceat(np.abs(self.vals), self.row_ptr[:-1]))) if self.nnz else 0.0

    def _is_symmetric(self) -> bool:
        S = self.to_scipy()
        D = (S - S.T).tocsr()
        D.eliminate_zeros()
        return D.nnz == 0

    def __matmul__(self, x):
        return spmv(self, x)


def spmv(A: SparseMatrixCsr, x: np.ndarray) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.shape != (A.n,):
        raise DimensionError(f"spmv: matrix is {A.n}x{A.n}, vector has shape {x.shape}")
    out = np.empty(A.n)
    _csr_matvec(A.row_ptr, A.col_idx, A.vals, x, out)
    return out


# ---------------------------------------------------------------------------
# vector operations


def _check_same(v, w, op):
    if v.shape != w.shape:
        raise DimensionError(f"{op}: shapes {v.shape} and {w.shape} differ")


def dot(v: np.ndarray, w: np.ndarray) -> float:
    v = np.ascontiguousarray(v, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    _check_same(v, w, "dot")
    return float(_seq_dot(v, w))


def norm2(v: np.ndarray) -> float:
    return float(np.sqrt(dot(v, v)))


def axpy(alpha: float, v: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Return alpha*v + w."""
    v = np.asarray(v, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    _check_same(v, w, "axpy")
    return alpha * v + w


def scale(alpha: float, v: np.ndarray) -> np.ndarray:
    return alpha * np.asarray(v, dtype=np.float64)


# ---------------------------------------------------------------------------
# structured matrices


@dataclass
class SymTridiag:
    """Symmetric tridiagonal matrix (diagonal gamma, off-diagonal delta).

    With ``len(delta) == len(gamma)`` the trailing entry is the subdiagonal
    element of the rectangular (j+1) x j Lanczos matrix.
    """

    gamma: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=np.float64).ravel()
        self.delta = np.asarray(self.delta, dtype=np.float64).ravel()
        if len(self.delta) not in (len(self.gamma) - 1, len(self.gamma)):
            raise ValueError(
                f"inconsistent lengths: {len(self.gamma)} diagonal, {len(self.delta)} off-diagonal"
            )
        if not (np.all(np.isfinite(self.gamma)) and np.all(np.isfinite(self.delta))):
            raise ValueError("tridiagonal entries must be finite")

    @property
    def dim(self) -> int:
        return len(self.gamma)

    @property
    def is_square(self) -> bool:
        return len(self.delta) == len(self.gamma) - 1

    def square(self) -> "SymTridiag":
        return SymTridiag(self.gamma, self.delta[: self.dim - 1])

    def leading(self, k: int) -> "SymTridiag":
        return SymTridiag(self.gamma[:k], self.delta[: max(k - 1, 0)])

    def to_dense(self) -> np.ndarray:
        j = self.dim
        rows = j + 1 if not self.is_square else j
        H = np.zeros((rows, j))
        H[np.arange(j), np.arange(j)] = self.gamma
        off = self.delta[: j - 1]
        H[np.arange(j - 1), np.arange(1, j)] = off
        H[np.arange(1, j), np.arange(j - 1)] = off
        if not self.is_square and j:
            H[j, j - 1] = self.delta[j - 1]
        return H


def sym_tridiag_eigenvalues(H: SymTridiag) -> np.ndarray:
    """All eigenvalues of a square symmetric tridiagonal matrix, ascending."""
    if not H.is_square:
        raise ValueError("eigenvalues need a square tridiagonal matrix")
    if H.dim == 0:
        return np.empty(0)
    if H.dim == 1:
        return H.gamma.copy()
    # LAPACK bisection on Sturm counts; abstol = 2*underflow is its most accurate setting
    return scipy.linalg.eigvalsh_tridiagonal(
        H.gamma, H.delta, lapack_driver="stebz", tol=2 * np.finfo(np.float64).tiny
    )


def band_upper_from_dense(G: np.ndarray, bandwidth: int) -> np.ndarray:
    """Copy of ``G`` with everything outside the upper band zeroed."""
    G = np.triu(np.asarray(G, dtype=np.float64))
    n = G.shape[0]
    i, k = np.indices((n, n))
    G[(k - i) >= bandwidth] = 0.0
    return G


def invert_upper_triangular(T: np.ndarray) -> np.ndarray:
    """Inverse of an upper triangular matrix by column-wise back substitution.

    Raises SingularMatrixError on a diagonal entry with magnitude below 1e-300
    (or a non-finite one).
    """
    T = np.ascontiguousarray(T, dtype=np.float64)
    if T.ndim != 2 or T.shape[0] != T.shape[1]:
        raise DimensionError(f"need a square matrix, got {T.shape}")
    d = np.diag(T)
    bad = np.flatnonzero(~(np.abs(d) >= SINGULAR_DIAG_THRESHOLD))
    if bad.size:
        raise SingularMatrixError(int(bad[0]), float(d[bad[0]]))
    out = np.zeros_like(T)
    _upper_tri_inverse(np.triu(T), out)
    return out


def leading_block_max_norms(T: np.ndarray) -> np.ndarray:
    """``max_abs_norm(inv(T[:j, :j]))`` for j = 1..k, where k is the last
    nonsingular leading dimension.

    Column k of the back-substituted inverse depends only on ``T[:k+1,:k+1]``,
    so one inversion yields all leading-block inverses.
    """
    T = np.asarray(T, dtype=np.float64)
    d = np.diag(T)
    ok = np.abs(d) >= SINGULAR_DIAG_THRESHOLD
    k = T.shape[0] if ok.all() else int(np.argmin(ok))
    if k == 0:
        return np.empty(0)
    Tinv = invert_upper_triangular(T[:k, :k])
    colmax = np.abs(Tinv).max(axis=0)
    return np.maximum.accumulate(colmax)


def max_abs_norm(M) -> float:
    M = np.asarray(M, dtype=np.float64)
    return float(np.abs(M).max()) if M.size else 0.0


def poly_eval(t, shifts) -> np.ndarray:
    """Scalar basis polynomial prod_i (t - sigma_i), elementwise in ``t``."""
    t = np.asarray(t, dtype=np.float64)
    out = np.ones_like(t)
    for s in np.asarray(shifts, dtype=np.float64):
        out = out * (t - s)
    return out


def shifted_poly_apply(H: SymTridiag, shifts) -> np.ndarray:
    """Dense ``prod_j (H - sigma_j I)`` for square tridiagonal ``H``."""
    if not H.is_square:
        raise ValueError("polynomial needs a square tridiagonal matrix")
    Hd = H.to_dense()
    j = H.dim
    P = np.eye(j)
    for s in np.asarray(getattr(shifts, "shifts", shifts), dtype=np.float64):
        P = P @ (Hd - s * np.eye(j))
    return P
