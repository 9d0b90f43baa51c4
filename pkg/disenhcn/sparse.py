"""Compressed-sparse-row algebra used by every incidence and adjacency computation.

`CsrMatrix` is an immutable canonical CSR value (sorted, duplicate-free column
indices, no stored zeros, float64). The kernels delegate to scipy.sparse and
re-canonicalize their results.
"""
from contextlib import contextmanager
from dataclasses import dataclass
from functools import cached_property
from typing import Iterator, List, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from disenhcn.errors import ShapeError

# Row-major float64 array; the carrier for embedding matrices.
DenseMatrix = np.ndarray

_audit_logs: List[list] = []


@contextmanager
def audit_allocations() -> Iterator[List[Tuple[int, int, int]]]:
    """Record (n_rows, n_cols, nnz) of every CsrMatrix built inside the block."""
    log: List[Tuple[int, int, int]] = []
    _audit_logs.append(log)
    try:
        yield log
    finally:
        _audit_logs.remove(log)


@dataclass(frozen=True, eq=False)
class CsrMatrix:
    n_rows: int
    n_cols: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        for log in _audit_logs:
            log.append((self.n_rows, self.n_cols, self.nnz))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.n_rows, self.n_cols

    @property
    def nnz(self) -> int:
        return int(self.values.shape[0])

    @cached_property
    def scipy(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.values, self.col_idx, self.row_ptr), shape=self.shape, copy=False)

    def __repr__(self) -> str:
        return f"CsrMatrix({self.n_rows}x{self.n_cols}, nnz={self.nnz})"


def _from_scipy(m) -> CsrMatrix:
    m = sp.csr_matrix(m, dtype=np.float64, copy=True)
    m.sum_duplicates()
    m.eliminate_zeros()
    m.sort_indices()
    return CsrMatrix(
        n_rows=int(m.shape[0]),
        n_cols=int(m.shape[1]),
        row_ptr=m.indptr.astype(np.int64),
        col_idx=m.indices.astype(np.int64),
        values=m.data.astype(np.float64),
    )


def from_triplets(n_rows: int, n_cols: int, entries: Sequence[Tuple[int, int, float]]) -> CsrMatrix:
    """Build a canonical matrix; duplicate coordinates are summed, zeros dropped."""
    if len(entries):
        rows, cols, vals = (np.asarray(x) for x in zip(*entries))
    else:
        rows = cols = np.zeros(0, dtype=np.int64)
        vals = np.zeros(0, dtype=np.float64)
    return from_arrays(n_rows, n_cols, rows, cols, vals)


def from_arrays(n_rows: int, n_cols: int, rows, cols, vals) -> CsrMatrix:
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    vals = np.asarray(vals, dtype=np.float64)
    if len(rows) and (rows.min() < 0 or rows.max() >= n_rows or cols.min() < 0 or cols.max() >= n_cols):
        raise ShapeError(f"triplet index out of range for a {n_rows}x{n_cols} matrix")
    return _from_scipy(sp.coo_matrix((vals, (rows, cols)), shape=(n_rows, n_cols)))


def identity(n: int) -> CsrMatrix:
    return _from_scipy(sp.identity(n, dtype=np.float64, format="csr"))


def to_dense(a: CsrMatrix) -> DenseMatrix:
    return a.scipy.toarray()


def nbytes(a: CsrMatrix) -> int:
    return int(a.row_ptr.nbytes + a.col_idx.nbytes + a.values.nbytes)


def check_canonical(a: CsrMatrix) -> None:
    """Raise ShapeError naming the first violated CSR invariant."""
    if a.row_ptr.shape[0] != a.n_rows + 1:
        raise ShapeError("row_ptr length must be n_rows + 1")
    if a.row_ptr[0] != 0:
        raise ShapeError("row_ptr[0] must be 0")
    if np.any(np.diff(a.row_ptr) < 0):
        raise ShapeError("row_ptr must be non-decreasing")
    if not (a.row_ptr[-1] == a.col_idx.shape[0] == a.values.shape[0]):
        raise ShapeError("row_ptr[n_rows], len(col_idx) and len(values) must agree")
    if a.values.dtype != np.float64:
        raise ShapeError("values must be float64")
    if a.nnz:
        if a.col_idx.min() < 0 or a.col_idx.max() >= a.n_cols:
            raise ShapeError("column index out of range")
        if np.any(a.values == 0.0):
            raise ShapeError("explicitly stored zero")
        row_of = np.repeat(np.arange(a.n_rows), np.diff(a.row_ptr))
        same_row = row_of[1:] == row_of[:-1]
        if np.any(np.diff(a.col_idx)[same_row] <= 0):
            raise ShapeError("column indices must be strictly increasing within a row")


def transpose(a: CsrMatrix) -> CsrMatrix:
    return _from_scipy(a.scipy.T.tocsr())


def spgemm(a: CsrMatrix, b: CsrMatrix) -> CsrMatrix:
    if a.n_cols != b.n_rows:
        raise ShapeError(f"spgemm shape mismatch: {a.shape} x {b.shape}")
    return _from_scipy(a.scipy @ b.scipy)


def spmm_dense(a: CsrMatrix, x: DenseMatrix) -> DenseMatrix:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or a.n_cols != x.shape[0]:
        raise ShapeError(f"spmm shape mismatch: {a.shape} x {x.shape}")
    return np.asarray(a.scipy @ x)


def spmm_dense_transposed(a: CsrMatrix, x: DenseMatrix) -> DenseMatrix:
    """Aᵀ·X without materializing Aᵀ (the backward of spmm_dense)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or a.n_rows != x.shape[0]:
        raise ShapeError(f"spmm shape mismatch: {a.shape}ᵀ x {x.shape}")
    return np.asarray(a.scipy.T @ x)


def hadamard(a: CsrMatrix, b: CsrMatrix) -> CsrMatrix:
    """Entrywise product over the intersection of the two patterns."""
    if a.shape != b.shape:
        raise ShapeError(f"hadamard shape mismatch: {a.shape} vs {b.shape}")
    small, large = (a, b) if a.nnz <= b.nnz else (b, a)
    return _from_scipy(small.scipy.multiply(large.scipy))


def row_sums(a: CsrMatrix) -> np.ndarray:
    return np.bincount(_row_of_entries(a), weights=a.values, minlength=a.n_rows).astype(np.float64)


def _row_of_entries(a: CsrMatrix) -> np.ndarray:
    return np.repeat(np.arange(a.n_rows, dtype=np.int64), np.diff(a.row_ptr))


def _require_nonnegative(a: CsrMatrix, op: str) -> None:
    if a.nnz and a.values.min() < 0:
        raise ShapeError(f"{op} requires non-negative entries")


def sym_normalize(a: CsrMatrix) -> CsrMatrix:
    """A_ij / sqrt(d_i d_j) with d = row_sums(A); zero-degree rows and columns stay zero."""
    if a.n_rows != a.n_cols:
        raise ShapeError(f"sym_normalize needs a square matrix, got {a.shape}")
    _require_nonnegative(a, "sym_normalize")
    d = row_sums(a)
    denom = d[_row_of_entries(a)] * d[a.col_idx]
    values = np.zeros_like(a.values)
    ok = denom > 0
    values[ok] = a.values[ok] / np.sqrt(denom[ok])
    return _from_scipy(sp.csr_matrix((values, a.col_idx, a.row_ptr), shape=a.shape))


def row_normalize(a: CsrMatrix) -> CsrMatrix:
    """D^-1 A: every non-empty row sums to one (mean aggregation)."""
    _require_nonnegative(a, "row_normalize")
    d = row_sums(a)[_row_of_entries(a)]
    values = np.zeros_like(a.values)
    ok = d > 0
    values[ok] = a.values[ok] / d[ok]
    return _from_scipy(sp.csr_matrix((values, a.col_idx, a.row_ptr), shape=a.shape))
