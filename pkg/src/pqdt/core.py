"""Problem data model, binary/CSV matrix I/O and closed-form memory estimators.

Matrices are thin immutable wrappers around numpy arrays.  The canonical
interchange format is a little-endian binary file::

    magic  "PQDT"      4 bytes
    version u32 = 1
    kind    u8          0 = dense, 1 = banded
    reserved            3 bytes
    rows    u64
    cols    u64
    payload             dense:  rows*cols f64, row-major
                        banded: rows x (band_start u64, band_len u64),
                                then the concatenated f64 band values

CSV (dense only, no header) is kept for debugging small matrices.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import NamedTuple, Union

import numpy as np
import scipy.sparse as sp

MAGIC = b"PQDT"
FORMAT_VERSION = 1
KIND_DENSE = 0
KIND_BANDED = 1
_HEADER = struct.Struct("<4sIB3xQQ")

ROW_SUM_TOL_POVM = 1e-9
ROW_SUM_TOL_PROBS = 1e-6

_MAX_BYTES = 2**63 - 1


class MatrixFormatError(ValueError):
    """Raised when a matrix file or array violates the format or its invariants."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class DenseMatrix:
    """Row-major float64 matrix; all entries finite."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise MatrixFormatError(f"dense matrix must be 2-D, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise MatrixFormatError("dense matrix contains non-finite entries")
        object.__setattr__(self, "values", _readonly(v))

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class BandedMatrix:
    """Non-negative matrix whose row ``d`` is zero outside ``[start[d], start[d] + length[d])``.

    The band values of all rows live in one contiguous buffer; ``offsets[d]``
    points at the first value of row ``d``.
    """

    n_rows: int
    n_cols: int
    starts: np.ndarray
    lengths: np.ndarray
    values: np.ndarray
    offsets: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        starts = np.asarray(self.starts, dtype=np.int64).ravel()
        lengths = np.asarray(self.lengths, dtype=np.int64).ravel()
        values = np.asarray(self.values, dtype=np.float64).ravel()
        if starts.shape != (self.n_rows,) or lengths.shape != (self.n_rows,):
            raise MatrixFormatError("band tables must have one entry per row")
        if np.any(starts < 0) or np.any(lengths < 0):
            raise MatrixFormatError("band starts and lengths must be non-negative")
        if np.any(starts + lengths > self.n_cols):
            bad = int(np.argmax(starts + lengths > self.n_cols))
            raise MatrixFormatError(
                f"row {bad}: band [{starts[bad]}, {starts[bad] + lengths[bad]}) "
                f"exceeds {self.n_cols} columns"
            )
        if values.size != int(lengths.sum()):
            raise MatrixFormatError(
                f"band payload has {values.size} values, tables require {int(lengths.sum())}"
            )
        if not np.all(np.isfinite(values)):
            raise MatrixFormatError("banded matrix contains non-finite entries")
        if np.any(values < 0):
            raise MatrixFormatError("banded matrix contains negative entries")
        offsets = np.zeros(self.n_rows + 1, dtype=np.int64)
        np.cumsum(lengths, out=offsets[1:])
        for name, arr in (("starts", starts), ("lengths", lengths), ("offsets", offsets)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "values", _readonly(values))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    @property
    def rows(self) -> int:
        return self.n_rows

    @property
    def cols(self) -> int:
        return self.n_cols

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    def band(self, d: int) -> tuple[int, np.ndarray]:
        """Return ``(start, values)`` of row ``d``."""
        return int(self.starts[d]), self.values[self.offsets[d]:self.offsets[d + 1]]

    def row_sums(self) -> np.ndarray:
        owner = np.repeat(np.arange(self.n_rows), self.lengths)
        return np.bincount(owner, weights=self.values, minlength=self.n_rows)

    def to_csr(self) -> sp.csr_matrix:
        owner = np.repeat(np.arange(self.n_rows), self.lengths)
        cols = np.arange(self.nnz, dtype=np.int64) - self.offsets[owner] + self.starts[owner]
        return sp.csr_matrix((self.values, cols, self.offsets), shape=self.shape)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        for d in range(self.n_rows):
            s, v = self.band(d)
            out[d, s:s + v.size] = v
        return out

    @classmethod
    def from_dense(cls, a: np.ndarray, atol: float = 0.0) -> "BandedMatrix":
        """Store each row between its first and last entry exceeding ``atol``."""
        a = np.asarray(a, dtype=np.float64)
        if a.ndim != 2:
            raise MatrixFormatError("expected a 2-D array")
        starts, lengths, chunks = [], [], []
        for row in a:
            nz = np.flatnonzero(np.abs(row) > atol)
            if nz.size == 0:
                starts.append(0)
                lengths.append(0)
                continue
            lo, hi = nz[0], nz[-1] + 1
            starts.append(lo)
            lengths.append(hi - lo)
            chunks.append(row[lo:hi])
        values = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(a.shape[0], a.shape[1], np.array(starts), np.array(lengths), values)


@dataclass(frozen=True)
class PovmMatrix:
    """M x N matrix of POVM weights: non-negative rows summing to one."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise MatrixFormatError(f"POVM matrix must be 2-D, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise MatrixFormatError("POVM matrix contains non-finite entries")
        if np.any(v < 0):
            raise MatrixFormatError(f"POVM matrix has negative entry {v.min():.3e}")
        err = np.abs(v.sum(axis=1) - 1.0)
        if err.size and err.max() > ROW_SUM_TOL_POVM:
            i = int(np.argmax(err))
            raise MatrixFormatError(f"POVM row {i} sums to {v[i].sum():.12g}")
        object.__setattr__(self, "values", _readonly(v))

    @property
    def M(self) -> int:
        return self.values.shape[0]

    @property
    def N(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class ProblemInstance:
    """Probe matrix ``F`` (D x M) and measured outcome matrix ``P`` (D x N)."""

    F: BandedMatrix
    P: DenseMatrix

    def __post_init__(self):
        F, P = self.F, self.P
        if isinstance(F, np.ndarray):
            F = BandedMatrix.from_dense(F)
            object.__setattr__(self, "F", F)
        if isinstance(P, np.ndarray):
            P = DenseMatrix(P)
            object.__setattr__(self, "P", P)
        if F.rows != P.rows:
            raise MatrixFormatError(f"F has {F.rows} rows but P has {P.rows}")
        err = np.abs(P.values.sum(axis=1) - 1.0)
        if err.size and err.max() > ROW_SUM_TOL_PROBS:
            d = int(np.argmax(err))
            raise MatrixFormatError(f"row {d} of P sums to {P.values[d].sum():.9g}")

    @property
    def D(self) -> int:
        return self.F.rows

    @property
    def M(self) -> int:
        return self.F.cols

    @property
    def N(self) -> int:
        return self.P.cols


# ---------------------------------------------------------------------------
# I/O

Matrix = Union[DenseMatrix, BandedMatrix, PovmMatrix]


def _infer_format(path, fmt):
    if fmt is not None:
        if fmt not in ("binary", "csv"):
            raise ValueError(f"unknown matrix format {fmt!r}")
        return fmt
    return "csv" if str(path).lower().endswith(".csv") else "binary"


def save_matrix(matrix, path, format: str | None = None) -> None:
    fmt = _infer_format(path, format)
    if isinstance(matrix, np.ndarray):
        matrix = DenseMatrix(matrix)
    if isinstance(matrix, PovmMatrix):
        matrix = DenseMatrix(matrix.values)
    if isinstance(matrix, DenseMatrix):
        if not np.all(np.isfinite(matrix.values)):
            raise MatrixFormatError("refusing to write non-finite entries")
    elif not isinstance(matrix, BandedMatrix):
        raise TypeError(f"cannot save object of type {type(matrix).__name__}")

    if fmt == "csv":
        if isinstance(matrix, BandedMatrix):
            matrix = DenseMatrix(matrix.to_dense())
        np.savetxt(path, matrix.values, delimiter=",", fmt="%.17g")
        return

    with open(path, "wb") as fh:
        if isinstance(matrix, DenseMatrix):
            fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, KIND_DENSE, matrix.rows, matrix.cols))
            fh.write(matrix.values.astype("<f8").tobytes())
        else:
            fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, KIND_BANDED, matrix.rows, matrix.cols))
            table = np.empty((matrix.rows, 2), dtype="<u8")
            table[:, 0] = matrix.starts
            table[:, 1] = matrix.lengths
            fh.write(table.tobytes())
            fh.write(matrix.values.astype("<f8").tobytes())


def load_matrix(path, format: str | None = None) -> DenseMatrix | BandedMatrix:
    fmt = _infer_format(path, format)
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    if fmt == "csv":
        try:
            a = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
        except ValueError as exc:
            raise MatrixFormatError(f"{path}: malformed CSV ({exc})") from exc
        return DenseMatrix(a)

    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise MatrixFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, kind, rows, cols = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise MatrixFormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise MatrixFormatError(f"{path}: unsupported format version {version}")
    body = memoryview(raw)[_HEADER.size:]

    if kind == KIND_DENSE:
        if len(body) != 8 * rows * cols:
            raise MatrixFormatError(
                f"{path}: header says {rows}x{cols} but payload holds {len(body) / 8:g} values"
            )
        a = np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(rows, cols)
        return DenseMatrix(a)
    if kind == KIND_BANDED:
        if len(body) < 16 * rows:
            raise MatrixFormatError(f"{path}: truncated band table")
        table = np.frombuffer(body[:16 * rows], dtype="<u8").reshape(rows, 2).astype(np.int64)
        vals = body[16 * rows:]
        if len(vals) % 8:
            raise MatrixFormatError(f"{path}: band payload is not a whole number of f64 values")
        values = np.frombuffer(vals, dtype="<f8").astype(np.float64)
        return BandedMatrix(rows, cols, table[:, 0], table[:, 1], values)
    raise MatrixFormatError(f"{path}: unknown matrix kind {kind}")


# ---------------------------------------------------------------------------
# Memory estimators


class SolverMemory(NamedTuple):
    """Solver memory estimate; ``slack`` names the linear terms with unknown constants."""

    bytes: int
    slack: str = "O(M)+O(N)"


def _check_dims(**dims):
    for name, v in dims.items():
        if int(v) != v or v <= 0:
            raise ValueError(f"{name} must be a positive integer, got {v!r}")


def _checked(nbytes: int) -> int:
    if nbytes > _MAX_BYTES:
        raise OverflowError(f"byte count {nbytes} does not fit in 63 bits")
    return nbytes


def mem_storage(M: int, N: int, D: int) -> int:
    """Bytes needed to hold Pi, F and P densely in float64."""
    _check_dims(M=M, N=N, D=D)
    M, N, D = int(M), int(N), int(D)
    return _checked(8 * (M * N + D * M + D * N))


def mem_solver(M: int, N: int, D: int) -> SolverMemory:
    """Working-set bytes of the two-stage solver, excluding the O(M)+O(N) vectors."""
    _check_dims(M=M, N=N, D=D)
    M, N, D = int(M), int(N), int(D)
    return SolverMemory(_checked(8 * (2 * N * D + 6 * N * M + M * D)))


def max_hilbert_dim(N: int, D: int, ranks_per_node: int, n_nodes: int, mem_node_bytes: float) -> int:
    """Largest M that fits the memory of ``n_nodes`` nodes; clamps at zero."""
    m = (n_nodes / 6.0) * (mem_node_bytes / (N * 8.0) - 2.0 * D * ranks_per_node)
    return max(0, int(np.floor(m)))
