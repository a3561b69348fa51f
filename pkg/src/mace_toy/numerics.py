"""Dense linear algebra helpers, RNG construction and the binary matrix format.

Matrices are plain float64 numpy arrays. The on-disk format is::

    b"MACE" | u32 version | u64 rows | u64 cols | rows*cols f64   (all little-endian)
"""
from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np
from scipy.linalg import cho_solve

from .errors import DimensionMismatch, NotPositiveDefinite, NumericalError

MAGIC = b"MACE"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQQ")

PIVOT_RTOL = 1e-14
SYMMETRY_RTOL = 1e-12


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise DimensionMismatch(f"expected a 2-d matrix, got shape {m.shape}")
    return m


def check_finite(m: np.ndarray, what: str = "result") -> np.ndarray:
    if not np.all(np.isfinite(m)):
        raise NumericalError(f"non-finite entries in {what}")
    return m


class SpdFactor:
    """Cholesky factor of a symmetric positive definite matrix.

    Built once, reused for several right-hand sides (the key and value
    projections share the same Gram matrix).
    """

    def __init__(self, A):
        A = as_matrix(A)
        if A.shape[0] != A.shape[1]:
            raise DimensionMismatch(f"matrix must be square, got {A.shape}")
        scale = max(np.max(np.abs(A)), 1.0)
        if np.max(np.abs(A - A.T)) > SYMMETRY_RTOL * scale:
            raise DimensionMismatch("matrix is not symmetric")
        max_diag = float(np.max(np.diag(A))) if A.size else 0.0
        if max_diag <= 0.0:
            raise NotPositiveDefinite("matrix has no positive diagonal entry")
        try:
            L = np.linalg.cholesky(A)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefinite(
                "factorization failed; too few prior embeddings for this dimension?"
            ) from exc
        pivots = np.diag(L) ** 2
        if np.min(pivots) <= PIVOT_RTOL * max_diag:
            raise NotPositiveDefinite(
                f"pivot {np.min(pivots):.3e} below {PIVOT_RTOL:g} x max diagonal"
            )
        self.n = A.shape[0]
        self.L = L

    def solve_right(self, rhs) -> np.ndarray:
        """Return X with X @ A = rhs."""
        rhs = as_matrix(rhs)
        if rhs.shape[1] != self.n:
            raise DimensionMismatch(f"rhs has {rhs.shape[1]} cols, expected {self.n}")
        X = cho_solve((self.L, True), rhs.T).T
        return check_finite(np.ascontiguousarray(X), "solve_spd")


def solve_spd(A, rhs) -> np.ndarray:
    """Solve X @ A = rhs for symmetric positive definite A."""
    return SpdFactor(A).solve_right(rhs)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def softmax_rows(M) -> np.ndarray:
    """Row-wise softmax over the last axis (works on stacked matrices too)."""
    M = np.asarray(M, dtype=np.float64)
    z = np.exp(M - M.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def frobenius_sq(M) -> float:
    M = np.asarray(M, dtype=np.float64)
    return float(np.sum(M * M))


def make_rng(seed: int, *labels) -> np.random.Generator:
    """PCG64 generator keyed by a base seed and an optional stream label path.

    Labels are hashed with CRC-32 so the derived streams are stable across
    platforms and Python versions (``hash()`` is salted per process).
    """
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for lab in labels:
        if isinstance(lab, (int, np.integer)):
            key.append(int(lab) & 0xFFFFFFFF)
        else:
            key.append(zlib.crc32(str(lab).encode("utf-8")))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))


def matrix_to_bytes(m) -> bytes:
    m = as_matrix(m)
    rows, cols = m.shape
    payload = np.ascontiguousarray(m, dtype="<f8").tobytes()
    return _HEADER.pack(MAGIC, FORMAT_VERSION, rows, cols) + payload


def matrix_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise ValueError("truncated matrix header")
    magic, version, rows, cols = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported matrix format version {version}")
    expected = _HEADER.size + 8 * rows * cols
    if len(buf) != expected:
        raise ValueError(f"matrix payload is {len(buf)} bytes, expected {expected}")
    data = np.frombuffer(buf, dtype="<f8", offset=_HEADER.size)
    return data.reshape(rows, cols).astype(np.float64)


def save_matrix(path, m) -> None:
    Path(path).write_bytes(matrix_to_bytes(m))


def load_matrix(path) -> np.ndarray:
    return matrix_from_bytes(Path(path).read_bytes())
