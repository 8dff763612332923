"""Compressed sparse containers used for features, labels, cluster maps and weights.

Vectors and matrices are immutable after construction (backing arrays are set
read-only) and validate their structural invariants up front, so downstream
code never re-checks them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import InvariantError


def _readonly(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass
class SparseVector:
    """Sorted-index sparse vector with float64 values."""

    indices: np.ndarray
    values: np.ndarray
    dim: int

    def __post_init__(self):
        self.indices = _readonly(np.ascontiguousarray(self.indices, dtype=np.int64))
        self.values = _readonly(np.ascontiguousarray(self.values, dtype=np.float64))
        self.dim = int(self.dim)
        if self.indices.shape != self.values.shape or self.indices.ndim != 1:
            raise InvariantError("indices/values must be 1-d arrays of equal length")
        if self.indices.size:
            if np.any(np.diff(self.indices) <= 0):
                raise InvariantError("vector indices must be strictly increasing")
            if self.indices[0] < 0 or self.indices[-1] >= self.dim:
                raise InvariantError("vector index out of range")
        if not np.all(np.isfinite(self.values)):
            raise InvariantError("vector values must be finite")

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dim)
        out[self.indices] = self.values
        return out

    @staticmethod
    def from_dense(v, tol: float = 0.0) -> "SparseVector":
        v = np.asarray(v, dtype=np.float64)
        idx = np.flatnonzero(np.abs(v) > tol)
        return SparseVector(idx, v[idx], v.size)

    def norm(self) -> float:
        return float(np.sqrt(np.dot(self.values, self.values)))


@dataclass
class SparseMatrix:
    """Row-major compressed matrix (CSR): offsets, column indices, float64 values."""

    rows: int
    cols: int
    indptr: np.ndarray
    indices: np.ndarray
    values: np.ndarray
    _csr: sp.csr_matrix = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.rows = int(self.rows)
        self.cols = int(self.cols)
        self.indptr = _readonly(np.ascontiguousarray(self.indptr, dtype=np.int64))
        self.indices = _readonly(np.ascontiguousarray(self.indices, dtype=np.int64))
        self.values = _readonly(np.ascontiguousarray(self.values, dtype=np.float64))
        self._validate()

    def _validate(self):
        if self.indptr.size != self.rows + 1 or self.indptr[0] != 0:
            raise InvariantError("bad row offsets")
        if self.indptr[-1] != self.indices.size or self.indices.size != self.values.size:
            raise InvariantError("offsets inconsistent with stored entries")
        if np.any(np.diff(self.indptr) < 0):
            raise InvariantError("row offsets must be non-decreasing")
        if self.indices.size:
            if self.indices.min() < 0 or self.indices.max() >= self.cols:
                raise InvariantError("column index out of range")
            # strict increase within each row: mask out positions that cross rows
            d = np.diff(self.indices)
            row_end = np.unique(self.indptr[1:-1]) - 1
            mask = np.ones(d.size, dtype=bool)
            mask[row_end[(row_end >= 0) & (row_end < d.size)]] = False
            if np.any(d[mask] <= 0):
                raise InvariantError("column indices must be strictly increasing per row")
        if not np.all(np.isfinite(self.values)):
            raise InvariantError("matrix values must be finite")

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def tocsr(self) -> sp.csr_matrix:
        """SciPy view sharing this matrix's arrays (no copy)."""
        if self._csr is None:
            self._csr = sp.csr_matrix(
                (self.values, self.indices, self.indptr),
                shape=(self.rows, self.cols),
                copy=False,
            )
        return self._csr

    @staticmethod
    def from_scipy(m) -> "SparseMatrix":
        m = sp.csr_matrix(m)
        m.sort_indices()
        m.sum_duplicates()
        return SparseMatrix(m.shape[0], m.shape[1], m.indptr, m.indices, m.data)

    def row(self, i: int) -> SparseVector:
        lo, hi = self.indptr[i], self.indptr[i + 1]
        return SparseVector(self.indices[lo:hi], self.values[lo:hi], self.cols)

    def row_lengths(self) -> np.ndarray:
        return np.diff(self.indptr)

    def select_rows(self, rows) -> "SparseMatrix":
        return SparseMatrix.from_scipy(self.tocsr()[np.asarray(rows, dtype=np.int64)])


def row_norms(m: SparseMatrix) -> np.ndarray:
    """Euclidean norm of every row."""
    lens = m.row_lengths()
    sq = np.zeros(m.rows)
    nz = lens > 0
    if m.values.size:
        sq[nz] = np.add.reduceat(m.values * m.values, m.indptr[:-1][nz])
    return np.sqrt(sq)


def l2_normalize_rows(m: SparseMatrix) -> SparseMatrix:
    """Scale every nonzero row to unit Euclidean norm; zero rows pass through."""
    lens = m.row_lengths()
    norms = row_norms(m)
    scale = np.ones(m.rows)
    nz = norms > 0
    scale[nz] = 1.0 / norms[nz]
    new_values = m.values * np.repeat(scale, lens)
    return SparseMatrix(m.rows, m.cols, m.indptr, m.indices, new_values)


def spmv(m: SparseMatrix, v: SparseVector) -> np.ndarray:
    """Row-wise sparse dot products against v, accumulated in float64."""
    if v.dim != m.cols:
        raise InvariantError(f"dimension mismatch: matrix cols {m.cols}, vector dim {v.dim}")
    return m.tocsr() @ v.to_dense()
