"""Sparse column-major data, LIBSVM ingestion and column partitioning.

The partitionable unit throughout the package is a *column* of the data
matrix: a feature for the primal variant, a training point for the dual one.
"""

from __future__ import annotations

import gzip
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

SAMPLES_AS_COLUMNS = "samples-as-columns"
FEATURES_AS_COLUMNS = "features-as-columns"
ORIENTATIONS = (SAMPLES_AS_COLUMNS, FEATURES_AS_COLUMNS)


class ParseError(ValueError):
    """Raised for malformed LIBSVM input; carries the 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ContractError(ValueError):
    """An argument violates an operation's precondition."""


class ColumnMatrix:
    """Immutable sparse matrix stored column-major.

    Backed by CSC arrays (``indptr``, ``indices``, ``data``). Row indices are
    strictly increasing within each column and explicit zeros are dropped.
    """

    __slots__ = ("n_rows", "n_cols", "indptr", "indices", "data", "_csc")

    def __init__(self, n_rows: int, n_cols: int, indptr, indices, data):
        self.n_rows = int(n_rows)
        self.n_cols = int(n_cols)
        csc = sp.csc_matrix(
            (np.asarray(data, dtype=np.float64),
             np.asarray(indices, dtype=np.int64),
             np.asarray(indptr, dtype=np.int64)),
            shape=(self.n_rows, self.n_cols),
        )
        csc.sum_duplicates()
        csc.eliminate_zeros()
        csc.sort_indices()
        self._csc = csc
        self.indptr = csc.indptr.astype(np.int64)
        self.indices = csc.indices.astype(np.int64)
        self.data = csc.data
        for arr in (self.indptr, self.indices, self.data):
            arr.setflags(write=False)

    @classmethod
    def from_scipy(cls, mat) -> "ColumnMatrix":
        csc = sp.csc_matrix(mat, dtype=np.float64)
        return cls(csc.shape[0], csc.shape[1], csc.indptr, csc.indices, csc.data)

    @classmethod
    def from_dense(cls, arr) -> "ColumnMatrix":
        return cls.from_scipy(sp.csc_matrix(np.asarray(arr, dtype=np.float64)))

    @classmethod
    def from_columns(cls, n_rows: int, columns: Sequence[Sequence[tuple[int, float]]]) -> "ColumnMatrix":
        indptr = [0]
        indices: list[int] = []
        data: list[float] = []
        for c, col in enumerate(columns):
            last = -1
            for r, val in col:
                if not last < r < n_rows:
                    raise ContractError(f"column {c}: row index {r} out of order or out of range")
                last = r
                indices.append(r)
                data.append(val)
            indptr.append(len(indices))
        return cls(n_rows, len(columns), indptr, indices, data)

    @property
    def shape(self) -> tuple[int, int]:
        return self.n_rows, self.n_cols

    @property
    def nnz(self) -> int:
        return int(self.indptr[-1])

    def column(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.indptr[i], self.indptr[i + 1]
        return self.indices[lo:hi], self.data[lo:hi]

    @property
    def columns(self) -> list[list[tuple[int, float]]]:
        return [list(zip(*(a.tolist() for a in self.column(i)))) for i in range(self.n_cols)]

    def to_scipy(self) -> sp.csc_matrix:
        return self._csc.copy()

    def to_dense(self) -> np.ndarray:
        return self._csc.toarray()

    def transpose(self) -> "ColumnMatrix":
        return ColumnMatrix.from_scipy(self._csc.T.tocsc())

    def matvec(self, x) -> np.ndarray:
        return np.asarray(self._csc @ np.asarray(x, dtype=np.float64)).ravel()

    def rmatvec(self, y) -> np.ndarray:
        """Return ``A^T y``, one inner product per column."""
        return np.asarray(self._csc.T @ np.asarray(y, dtype=np.float64)).ravel()

    def column_norms_sq(self) -> np.ndarray:
        sq = np.zeros(self.n_cols)
        np.add.at(sq, np.repeat(np.arange(self.n_cols), np.diff(self.indptr)), self.data ** 2)
        return sq

    def select_columns(self, cols) -> "ColumnMatrix":
        return ColumnMatrix.from_scipy(self._csc[:, np.asarray(cols, dtype=np.int64)])

    def scale_columns(self, factors) -> "ColumnMatrix":
        """Divide column ``i`` by ``factors[i]``."""
        factors = np.asarray(factors, dtype=np.float64)
        data = self.data / np.repeat(factors, np.diff(self.indptr))
        return ColumnMatrix(self.n_rows, self.n_cols, self.indptr, self.indices, data)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ColumnMatrix):
            return NotImplemented
        return (self.shape == other.shape
                and np.array_equal(self.indptr, other.indptr)
                and np.array_equal(self.indices, other.indices)
                and np.array_equal(self.data, other.data))

    def __repr__(self) -> str:
        return f"ColumnMatrix(n_rows={self.n_rows}, n_cols={self.n_cols}, nnz={self.nnz})"


@dataclass(frozen=True)
class Partition:
    """Disjoint assignment of columns to ``k_blocks`` workers."""

    k_blocks: int
    assignment: np.ndarray

    def __post_init__(self):
        assignment = np.asarray(self.assignment, dtype=np.int64)
        if assignment.ndim != 1:
            raise ContractError("assignment must be one-dimensional")
        if assignment.size and (assignment.min() < 0 or assignment.max() >= self.k_blocks):
            raise ContractError("block id out of range")
        assignment.setflags(write=False)
        object.__setattr__(self, "assignment", assignment)

    @property
    def n_cols(self) -> int:
        return int(self.assignment.size)

    @property
    def block_sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.k_blocks)

    def block(self, k: int) -> np.ndarray:
        """Sorted global column indices owned by block ``k``."""
        return np.flatnonzero(self.assignment == k)

    def blocks(self) -> list[np.ndarray]:
        return [self.block(k) for k in range(self.k_blocks)]

    @classmethod
    def from_blocks(cls, blocks: Sequence[Iterable[int]], n_cols: int) -> "Partition":
        assignment = np.full(n_cols, -1, dtype=np.int64)
        for k, cols in enumerate(blocks):
            for c in cols:
                if assignment[c] != -1:
                    raise ContractError(f"column {c} assigned twice")
                assignment[c] = k
        if (assignment < 0).any():
            raise ContractError("partition does not cover all columns")
        return cls(len(blocks), assignment)


@dataclass
class Dataset:
    """A column matrix with per-sample labels.

    ``labels`` has length ``n_rows`` when features are columns and ``n_cols``
    when samples are columns.
    """

    matrix: ColumnMatrix
    labels: np.ndarray
    orientation: str = SAMPLES_AS_COLUMNS
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.orientation not in ORIENTATIONS:
            raise ValueError(f"unknown orientation {self.orientation!r}")
        if not np.all(np.isfinite(self.labels)):
            raise ValueError("labels must be finite")

    @property
    def n_samples(self) -> int:
        return self.matrix.n_cols if self.orientation == SAMPLES_AS_COLUMNS else self.matrix.n_rows

    @property
    def n_features(self) -> int:
        return self.matrix.n_rows if self.orientation == SAMPLES_AS_COLUMNS else self.matrix.n_cols

    def transposed(self) -> "Dataset":
        other = FEATURES_AS_COLUMNS if self.orientation == SAMPLES_AS_COLUMNS else SAMPLES_AS_COLUMNS
        return Dataset(self.matrix.transpose(), self.labels.copy(), other, dict(self.meta))

    def oriented(self, orientation: str) -> "Dataset":
        return self if orientation == self.orientation else self.transposed()

    def check_classification(self) -> None:
        if not np.all(np.isin(self.labels, (-1.0, 1.0))):
            raise ValueError("classification labels must be in {-1, +1}")


def _parse_lines(lines: Iterable[str]):
    labels: list[float] = []
    rows: list[list[tuple[int, float]]] = []
    max_index = 0
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        try:
            labels.append(float(tokens[0]))
        except ValueError:
            raise ParseError(f"bad label {tokens[0]!r}", lineno) from None
        entries: list[tuple[int, float]] = []
        last = 0
        for tok in tokens[1:]:
            idx_s, sep, val_s = tok.partition(":")
            if not sep:
                raise ParseError(f"malformed token {tok!r}", lineno)
            try:
                idx = int(idx_s)
                val = float(val_s)
            except ValueError:
                raise ParseError(f"malformed token {tok!r}", lineno) from None
            if idx < 1:
                raise ParseError(f"index {idx} is not 1-based", lineno)
            if idx <= last:
                raise ParseError("indices must be strictly increasing", lineno)
            last = idx
            if val != 0.0:
                entries.append((idx - 1, val))
        max_index = max(max_index, last)
        rows.append(entries)
    if not rows:
        raise ParseError("empty input")
    return labels, rows, max_index


def parse_libsvm(text_stream, orientation: str = SAMPLES_AS_COLUMNS,
                 n_features: int | None = None, source: str | None = None) -> Dataset:
    """Parse LIBSVM text (``label idx:val ...``, 1-based indices).

    Parameters
    ----------
    text_stream : str or iterable of lines
    orientation : {"samples-as-columns", "features-as-columns"}
        With samples as columns every example becomes one column (dual
        variant layout); with features as columns the matrix is transposed.
    n_features : int, optional
        Overrides the dimension inferred from the largest index seen.
    """
    if orientation not in ORIENTATIONS:
        raise ValueError(f"unknown orientation {orientation!r}")
    if isinstance(text_stream, str):
        text_stream = io.StringIO(text_stream)
    labels, rows, max_index = _parse_lines(text_stream)
    dim = max_index if n_features is None else int(n_features)
    if dim < max_index:
        raise ParseError(f"index {max_index} exceeds n_features={dim}")
    mat = ColumnMatrix.from_columns(dim, rows)
    ds = Dataset(mat, np.array(labels), SAMPLES_AS_COLUMNS,
                 {"source": source, "normalized": False})
    return ds.oriented(orientation)


def load_libsvm(path, orientation: str = SAMPLES_AS_COLUMNS, n_features: int | None = None) -> Dataset:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rt") as fh:
        return parse_libsvm(fh, orientation, n_features, source=str(path))


def write_libsvm(dataset: Dataset, path) -> None:
    """Write one line per sample; inverse of :func:`load_libsvm`."""
    ds = dataset.oriented(SAMPLES_AS_COLUMNS)
    with open(path, "w") as fh:
        for i in range(ds.matrix.n_cols):
            idx, val = ds.matrix.column(i)
            feats = " ".join(f"{r + 1}:{v:.17g}" for r, v in zip(idx, val))
            fh.write(f"{ds.labels[i]:.17g} {feats}".rstrip() + "\n")


def normalize_columns(matrix: ColumnMatrix) -> tuple[ColumnMatrix, np.ndarray]:
    """Divide every column with norm > 1 by its norm.

    Returns the new matrix and per-column factors (1 for untouched columns),
    so that ``original[:, i] == scaled[:, i] * factors[i]``.
    """
    norms = np.sqrt(matrix.column_norms_sq())
    factors = np.where(norms > 1.0, norms, 1.0)
    return matrix.scale_columns(factors), factors


def partition_balanced(n_cols: int, k: int, seed: int | None = 0) -> Partition:
    """Shuffled round-robin assignment; block sizes differ by at most one."""
    if k < 1 or k > n_cols:
        raise ContractError(f"need 1 <= K <= n_cols, got K={k}, n_cols={n_cols}")
    order = np.random.default_rng(seed).permutation(n_cols)
    assignment = np.empty(n_cols, dtype=np.int64)
    assignment[order] = np.arange(n_cols) % k
    return Partition(k, assignment)


def block_matvec(matrix: ColumnMatrix, partition: Partition, k: int, alpha_block) -> np.ndarray:
    """Return ``A_[k] alpha_[k]`` for a full-length vector supported on block ``k``."""
    alpha_block = np.asarray(alpha_block, dtype=np.float64)
    if alpha_block.shape != (matrix.n_cols,):
        raise ContractError(f"expected length {matrix.n_cols}, got {alpha_block.shape}")
    outside = partition.assignment != k
    if np.any(alpha_block[outside] != 0.0):
        raise ContractError(f"alpha_block has support outside block {k}")
    return matrix.matvec(alpha_block)
