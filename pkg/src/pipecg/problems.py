"""Benchmark linear systems and Matrix Market ingestion."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .linalg import SparseMatrixCsr, spmv


class MatrixMarketError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class LinearSystem:
    A: SparseMatrixCsr
    b: np.ndarray
    x0: np.ndarray
    x_true: Optional[np.ndarray] = None
    spectral_interval: Optional[tuple[float, float]] = None

    def __post_init__(self):
        n = self.A.n
        if self.b.shape != (n,) or self.x0.shape != (n,):
            raise ValueError("b and x0 must have length A.n")
        if self.x_true is not None and self.x_true.shape != (n,):
            raise ValueError("x_true must have length A.n")

    @property
    def n(self) -> int:
        return self.A.n


def poisson2d(nx: int, ny: int) -> SparseMatrixCsr:
    """Unscaled 5-point Laplacian on the interior of an (nx+2) x (ny+2) grid.

    Diagonal 4, neighbours -1, lexicographic ordering with x fastest. The
    stencil is not divided by h**2, so the spectrum lies in (0, 8).
    """
    nx, ny = int(nx), int(ny)
    if nx < 1 or ny < 1:
        raise ValueError("grid dimensions must be positive")
    n = nx * ny
    if n > np.iinfo(np.int64).max // 5:
        raise OverflowError(f"grid {nx}x{ny} too large")
    Tx = sp.diags([-np.ones(nx - 1), 2 * np.ones(nx), -np.ones(nx - 1)], [-1, 0, 1])
    Ty = sp.diags([-np.ones(ny - 1), 2 * np.ones(ny), -np.ones(ny - 1)], [-1, 0, 1])
    # kron(I_y, T_x) couples x-neighbours (x fastest), kron(T_y, I_x) y-neighbours
    A = sp.kron(sp.identity(ny), Tx) + sp.kron(Ty, sp.identity(nx))
    A = sp.csr_matrix(A)
    A.eliminate_zeros()
    return SparseMatrixCsr.from_scipy(A)


def poisson2d_eigenvalues(nx: int, ny: int) -> np.ndarray:
    """Closed-form spectrum of `poisson2d`, ascending."""
    kx = np.arange(1, nx + 1)
    ky = np.arange(1, ny + 1)
    lx = 2 - 2 * np.cos(kx * np.pi / (nx + 1))
    ly = 2 - 2 * np.cos(ky * np.pi / (ny + 1))
    return np.sort((lx[None, :] + ly[:, None]).ravel())


def spectral_interval_poisson(nx: int, ny: int, exact: bool = False) -> tuple[float, float]:
    """Interval used for Chebyshev shifts on the Poisson problem.

    By default the fixed [0, 8] convention; ``exact=True`` returns the true
    extreme eigenvalues instead.
    """
    if not exact:
        return (0.0, 8.0)
    lx = [2 - 2 * math.cos(math.pi / (nx + 1)), 2 - 2 * math.cos(nx * math.pi / (nx + 1))]
    ly = [2 - 2 * math.cos(math.pi / (ny + 1)), 2 - 2 * math.cos(ny * math.pi / (ny + 1))]
    return (lx[0] + ly[0], lx[1] + ly[1])


RHS_MODES = ("uniform_inv_sqrt_n", "ones")


def rhs_from_solution(A: SparseMatrixCsr, mode: str = "uniform_inv_sqrt_n"):
    """Manufactured solution and matching right-hand side ``b = A @ x_true``."""
    if mode == "uniform_inv_sqrt_n":
        x_true = np.full(A.n, 1.0 / math.sqrt(A.n))
    elif mode == "ones":
        x_true = np.ones(A.n)
    else:
        raise ValueError(f"unknown rhs mode {mode!r}; expected one of {RHS_MODES}")
    return spmv(A, x_true), x_true


def make_system(A: SparseMatrixCsr, mode: str = "uniform_inv_sqrt_n", interval=None) -> LinearSystem:
    b, x_true = rhs_from_solution(A, mode)
    return LinearSystem(A, b, np.zeros(A.n), x_true, interval)


def poisson_system(nx: int, ny: int, mode: str = "uniform_inv_sqrt_n") -> LinearSystem:
    return make_system(poisson2d(nx, ny), mode, spectral_interval_poisson(nx, ny))


def load_matrix_market(path) -> SparseMatrixCsr:
    """Read a real coordinate Matrix Market file into full-pattern CSR.

    Symmetric storage is mirrored, duplicates are summed. A ``general`` file
    is accepted only when its content is exactly symmetric.
    """
    path = Path(path)
    with path.open() as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise MatrixMarketError("empty file", 1)
    header = lines[0].split()
    if len(header) != 5 or header[0] != "%%MatrixMarket" or header[1].lower() != "matrix":
        raise MatrixMarketError("missing '%%MatrixMarket matrix' header", 1)
    fmt, field, symmetry = (h.lower() for h in header[2:])
    if fmt != "coordinate":
        raise MatrixMarketError(f"unsupported format {fmt!r} (need coordinate)", 1)
    if field not in ("real", "integer"):
        raise MatrixMarketError(f"unsupported field {field!r} (need real)", 1)
    if symmetry not in ("symmetric", "general"):
        raise MatrixMarketError(f"unsupported symmetry {symmetry!r}", 1)

    lineno = 1
    size = None
    for lineno in range(2, len(lines) + 1):
        text = lines[lineno - 1].strip()
        if text and not text.startswith("%"):
            size = text.split()
            break
    if size is None:
        raise MatrixMarketError("missing size line", lineno)
    try:
        nrows, ncols, nnz = (int(t) for t in size)
    except ValueError:
        raise MatrixMarketError(f"malformed size line {' '.join(size)!r}", lineno) from None
    if nrows != ncols:
        raise MatrixMarketError(f"matrix is not square ({nrows}x{ncols})", lineno)

    rows, cols, vals = [], [], []
    for k in range(lineno + 1, len(lines) + 1):
        text = lines[k - 1].strip()
        if not text or text.startswith("%"):
            continue
        parts = text.split()
        if len(parts) != 3:
            raise MatrixMarketError(f"expected 'row col value', got {text!r}", k)
        try:
            i, j, v = int(parts[0]), int(parts[1]), float(parts[2])
        except ValueError:
            raise MatrixMarketError(f"cannot parse entry {text!r}", k) from None
        if not (1 <= i <= nrows and 1 <= j <= ncols):
            raise MatrixMarketError(f"index ({i}, {j}) out of range", k)
        if symmetry == "symmetric" and j > i:
            raise MatrixMarketError(f"entry ({i}, {j}) above the diagonal in symmetric file", k)
        rows.append(i - 1)
        cols.append(j - 1)
        vals.append(v)
    if len(vals) != nnz:
        raise MatrixMarketError(f"expected {nnz} entries, found {len(vals)}")

    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    vals = np.asarray(vals, dtype=np.float64)
    if symmetry == "symmetric":
        off = rows != cols
        rows, cols, vals = (
            np.concatenate([rows, cols[off]]),
            np.concatenate([cols, rows[off]]),
            np.concatenate([vals, vals[off]]),
        )
    M = sp.coo_matrix((vals, (rows, cols)), shape=(nrows, ncols)).tocsr()
    M.sum_duplicates()
    M.sort_indices()
    try:
        return SparseMatrixCsr(nrows, M.indptr, M.indices, M.data)
    except ValueError as exc:
        raise MatrixMarketError(str(exc)) from None
