"""Sparse column-stochastic matrices and support-restricted simplex projection.

Projection only ever acts on a vector's support.  Entries outside the
support stay exactly zero, so a matrix keeps the sparsity pattern it was
built with through any number of gradient/projection rounds.
"""

from __future__ import annotations

from typing import TextIO

import numpy as np
import scipy.sparse as sp

__all__ = [
    "ColumnStochasticMatrix",
    "ProjectionError",
    "project_to_simplex",
    "project_segments",
    "project_columns",
]

COLUMN_SUM_ATOL = 1e-9


class ProjectionError(ValueError):
    pass


def project_to_simplex(w, support=None) -> np.ndarray:
    """Euclidean projection of ``w`` onto the simplex over its support.

    Parameters
    ----------
    w : array_like, shape (n,)
        Input vector.
    support : array_like of bool, optional
        Entries allowed to carry mass.  Defaults to the nonzeros of ``w``.

    Returns
    -------
    ndarray
        ``x >= 0`` with ``sum(x) == 1`` minimising ``||x - w||`` subject to
        ``x`` vanishing off the support.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1:
        raise ValueError("project_to_simplex expects a 1-D vector")
    if not np.all(np.isfinite(w)):
        raise ProjectionError("input has non-finite entries")
    idx = np.flatnonzero(w != 0) if support is None else np.flatnonzero(np.asarray(support, bool))
    if idx.size == 0:
        raise ProjectionError("cannot project a vector with empty support")
    u = np.sort(w[idx])[::-1]
    css = np.cumsum(u)
    r = np.arange(1, u.size + 1)
    rho = r[u - (css - 1.0) / r > 0][-1]
    theta = (css[rho - 1] - 1.0) / rho
    out = np.zeros_like(w)
    out[idx] = np.maximum(w[idx] - theta, 0.0)
    return out


def project_segments(values: np.ndarray, indptr: np.ndarray) -> np.ndarray:
    """Project every segment ``values[indptr[c]:indptr[c+1]]`` independently.

    Vectorised form of :func:`project_to_simplex` where each segment is a
    column's full (fixed) support.  Empty segments are left empty.
    """
    values = np.asarray(values, dtype=np.float64)
    indptr = np.asarray(indptr, dtype=np.int64)
    lengths = np.diff(indptr)
    nonempty = lengths > 0
    starts = indptr[:-1][nonempty]
    lengths = lengths[nonempty]
    if values.size == 0:
        return values.copy()
    seg = np.repeat(np.arange(starts.size), lengths)
    order = np.lexsort((-values, seg))
    u = values[order]
    css = np.cumsum(u)
    offset = np.concatenate(([0.0], css[starts[1:] - 1]))
    css -= np.repeat(offset, lengths)
    rank = np.arange(values.size) - np.repeat(starts, lengths) + 1
    ok = u - (css - 1.0) / rank > 0
    rho = np.maximum.reduceat(np.where(ok, rank, 0), starts)
    theta = (css[starts + rho - 1] - 1.0) / rho
    return np.maximum(values - np.repeat(theta, lengths), 0.0)


class ColumnStochasticMatrix:
    """``N x N`` sparse matrix whose nonempty columns are distributions.

    Entries are stored in column-major order (``cols`` then ``rows``
    ascending).  The stored pattern is the matrix *support*; stored values
    may be zero, but no value outside the pattern can ever become nonzero.
    Column ``j`` is the next-state distribution out of state ``j``.
    """

    def __init__(self, n: int, rows, cols, values, check: bool = True):
        rows = np.asarray(rows, dtype=np.int64).reshape(-1)
        cols = np.asarray(cols, dtype=np.int64).reshape(-1)
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if not (rows.size == cols.size == values.size):
            raise ValueError("rows, cols and values must have equal length")
        order = np.lexsort((rows, cols))
        rows, cols, values = rows[order], cols[order], values[order]
        self.n = int(n)
        self.rows = rows
        self.cols = cols
        self.values = values
        self.indptr = np.searchsorted(cols, np.arange(self.n + 1)).astype(np.int64)
        for a in (self.rows, self.cols, self.values, self.indptr):
            a.flags.writeable = False
        if check:
            self.validate()

    def validate(self, atol: float = COLUMN_SUM_ATOL) -> None:
        if self.rows.size:
            if self.rows.min() < 0 or self.rows.max() >= self.n:
                raise ValueError("row index out of range")
            if self.cols.min() < 0 or self.cols.max() >= self.n:
                raise ValueError("column index out of range")
            dup = (np.diff(self.cols) == 0) & (np.diff(self.rows) == 0)
            if dup.any():
                raise ValueError("duplicate entries in support")
        if not np.all(np.isfinite(self.values)) or (self.values < 0).any():
            raise ValueError("entries must be finite and nonnegative")
        sums = self.column_sums()
        bad = self.nonempty_columns()[np.abs(sums[self.nonempty_columns()] - 1.0) > atol]
        if bad.size:
            j = int(bad[0])
            raise ValueError(f"column {j} sums to {sums[j]!r}, not 1")

    @classmethod
    def from_dense(cls, a) -> "ColumnStochasticMatrix":
        a = np.asarray(a, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("expected a square matrix")
        rows, cols = np.nonzero(a)
        return cls(a.shape[0], rows, cols, a[rows, cols])

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    def column(self, j: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.indptr[j], self.indptr[j + 1]
        return self.rows[lo:hi], self.values[lo:hi]

    def column_sums(self) -> np.ndarray:
        return np.bincount(self.cols, weights=self.values, minlength=self.n)

    def nonempty_columns(self) -> np.ndarray:
        return np.flatnonzero(np.diff(self.indptr) > 0)

    def has_column(self, j: int) -> bool:
        return bool(self.indptr[j + 1] > self.indptr[j])

    def with_values(self, values, check: bool = False) -> "ColumnStochasticMatrix":
        """Same support, new values (given in storage order)."""
        out = object.__new__(ColumnStochasticMatrix)
        out.n, out.rows, out.cols, out.indptr = self.n, self.rows, self.cols, self.indptr
        v = np.array(values, dtype=np.float64).reshape(-1)
        if v.size != self.values.size:
            raise ValueError("values do not match support size")
        v.flags.writeable = False
        out.values = v
        if check:
            out.validate()
        return out

    def to_csc(self) -> sp.csc_matrix:
        return sp.csc_matrix((self.values, self.rows, self.indptr), shape=(self.n, self.n))

    def to_dense(self) -> np.ndarray:
        a = np.zeros((self.n, self.n))
        a[self.rows, self.cols] = self.values
        return a

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self.to_csc() @ np.asarray(x, dtype=np.float64)

    def entry(self, i: int, j: int) -> float:
        lo, hi = self.indptr[j], self.indptr[j + 1]
        k = lo + np.searchsorted(self.rows[lo:hi], i)
        if k < hi and self.rows[k] == i:
            return float(self.values[k])
        return 0.0

    def __eq__(self, other) -> bool:
        if not isinstance(other, ColumnStochasticMatrix):
            return NotImplemented
        return (self.n == other.n and np.array_equal(self.rows, other.rows)
                and np.array_equal(self.cols, other.cols)
                and np.array_equal(self.values, other.values))

    def __repr__(self) -> str:
        return f"ColumnStochasticMatrix(n={self.n}, nnz={self.nnz})"

    def export(self, stream: TextIO) -> None:
        """``col<TAB>row<TAB>value`` triplets, 17 significant digits."""
        for c, r, v in zip(self.cols.tolist(), self.rows.tolist(), self.values.tolist()):
            stream.write(f"{c}\t{r}\t{v:.17g}\n")


def project_columns(m) -> ColumnStochasticMatrix:
    """Project each column of a raw square matrix onto the simplex over its support.

    ``m`` may be a dense array, a scipy sparse matrix (its stored pattern is
    the support) or a :class:`ColumnStochasticMatrix`.  All-zero dense
    columns become empty columns.
    """
    if isinstance(m, ColumnStochasticMatrix):
        n, rows, cols, vals = m.n, m.rows, m.cols, m.values
    elif sp.issparse(m):
        coo = sp.coo_matrix(m)
        n, rows, cols, vals = coo.shape[0], coo.row, coo.col, coo.data
        if coo.shape[0] != coo.shape[1]:
            raise ValueError("expected a square matrix")
    else:
        a = np.asarray(m, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("expected a square matrix")
        rows, cols = np.nonzero(a)
        n, vals = a.shape[0], a[rows, cols]
    vals = np.asarray(vals, dtype=np.float64)
    bad = ~np.isfinite(vals)
    if bad.any():
        j = int(np.asarray(cols)[np.flatnonzero(bad)[0]])
        raise ProjectionError(f"column {j}: non-finite entry")
    support = ColumnStochasticMatrix(n, rows, cols, vals, check=False)
    return support.with_values(project_segments(support.values, support.indptr), check=True)
