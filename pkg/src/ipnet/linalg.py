"""Small dense complex linear algebra.

Matrices are plain ``complex128`` numpy arrays. Every routine accepts a
single ``(rows, cols)`` matrix or a stack ``(..., rows, cols)`` so Monte
Carlo sweeps can push thousands of 4x4 channels through one call.

Inversion is done here with partial-pivoted Gauss-Jordan elimination rather
than LAPACK so the number of eliminations can be counted (see
:func:`count_ops`).
"""

from __future__ import annotations

import contextlib
import dataclasses
from typing import Iterator

import numpy as np

__all__ = [
    "ShapeError",
    "SingularMatrixError",
    "DegenerateInputError",
    "OpCounts",
    "count_ops",
    "as_cmatrix",
    "matmul",
    "hermitian",
    "invert",
    "frobenius_norm",
    "max_eigenvector",
]

SINGULAR_RTOL = 1e-12
POWER_ITER_TOL = 1e-10
POWER_ITER_MAX = 10_000


class ShapeError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


class SingularMatrixError(np.linalg.LinAlgError):
    """Raised when elimination meets a pivot below the singularity threshold."""

    def __init__(self, pivot: float, threshold: float):
        self.pivot = float(pivot)
        self.threshold = float(threshold)
        super().__init__(
            f"matrix is singular to working precision: pivot magnitude "
            f"{self.pivot:.3e} below threshold {self.threshold:.3e}"
        )


@dataclasses.dataclass
class OpCounts:
    inversions: int = 0
    pivots: int = 0


_active_counters: list[OpCounts] = []


@contextlib.contextmanager
def count_ops() -> Iterator[OpCounts]:
    """Count matrix inversions and elimination pivots performed in the block.

    >>> with count_ops() as ops:
    ...     _ = invert(np.eye(3))
    >>> ops.inversions, ops.pivots
    (1, 3)
    """
    counts = OpCounts()
    _active_counters.append(counts)
    try:
        yield counts
    finally:
        _active_counters.remove(counts)


def _record(inversions: int, pivots: int) -> None:
    for c in _active_counters:
        c.inversions += inversions
        c.pivots += pivots


def as_cmatrix(a) -> np.ndarray:
    """Coerce to a finite complex128 array with at least two dimensions."""
    a = np.asarray(a, dtype=np.complex128)
    if a.ndim < 2:
        raise ShapeError(f"expected a matrix, got shape {a.shape}")
    if 0 in a.shape[-2:]:
        raise ShapeError(f"matrix dimensions must be positive, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    return a


def matmul(a, b) -> np.ndarray:
    a = as_cmatrix(a)
    b = as_cmatrix(b)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def hermitian(a) -> np.ndarray:
    """Conjugate transpose of the last two axes."""
    return np.conj(np.swapaxes(as_cmatrix(a), -1, -2))


def frobenius_norm(a) -> np.ndarray | float:
    a = as_cmatrix(a)
    norm = np.sqrt(np.sum(a.real**2 + a.imag**2, axis=(-2, -1)))
    return float(norm) if norm.ndim == 0 else norm


def invert(z) -> np.ndarray:
    """Invert square matrices by partial-pivoted Gauss-Jordan elimination.

    A pivot whose magnitude falls below ``1e-12`` times the largest entry of
    the original matrix raises :class:`SingularMatrixError`.
    """
    z = as_cmatrix(z)
    n = z.shape[-1]
    if z.shape[-2] != n:
        raise ShapeError(f"cannot invert non-square matrix of shape {z.shape}")
    batch_shape = z.shape[:-2]
    a = z.reshape(-1, n, n).copy()
    count = a.shape[0]
    inv = np.broadcast_to(np.eye(n, dtype=np.complex128), a.shape).copy()
    threshold = SINGULAR_RTOL * np.abs(a).max(axis=(1, 2))
    rows = np.arange(count)

    for col in range(n):
        piv = col + np.argmax(np.abs(a[:, col:, col]), axis=1)
        for m in (a, inv):
            tmp = m[rows, col].copy()
            m[rows, col] = m[rows, piv]
            m[rows, piv] = tmp
        pivot = a[:, col, col].copy()
        mag = np.abs(pivot)
        bad = ~(mag > threshold)
        if bad.any():
            i = int(np.argmax(bad))
            raise SingularMatrixError(mag[i], threshold[i])
        a[:, col] /= pivot[:, None]
        inv[:, col] /= pivot[:, None]
        factor = a[:, :, col].copy()
        factor[:, col] = 0.0
        a -= factor[:, :, None] * a[:, None, col, :]
        inv -= factor[:, :, None] * inv[:, None, col, :]

    _record(count, count * n)
    return inv.reshape(*batch_shape, n, n)


def _fix_phase(v: np.ndarray) -> np.ndarray:
    i = int(np.argmax(np.abs(v)))
    mag = np.abs(v[i])
    v = v * (np.conj(v[i]) / mag)
    v[i] = mag
    return v


def max_eigenvector(a) -> np.ndarray:
    """Dominant unit eigenvector of a Hermitian PSD matrix via power iteration.

    Starts from the all-ones vector. The returned vector has its
    largest-magnitude component (lowest index on ties) real and positive.
    If the start vector is annihilated by ``a``, the standard basis vectors
    are tried in order.
    """
    a = as_cmatrix(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"expected a square matrix, got shape {a.shape}")
    n = a.shape[0]
    scale = np.abs(a).max()
    if scale == 0.0:
        raise DegenerateInputError("zero matrix has no dominant eigenvector")

    starts = [np.ones(n, dtype=np.complex128)] + list(np.eye(n, dtype=np.complex128))
    for v in starts:
        v = v / np.linalg.norm(v)
        prev_change = np.inf
        for _ in range(POWER_ITER_MAX):
            w = a @ v
            norm = np.linalg.norm(w)
            if norm <= SINGULAR_RTOL * scale:
                break
            w = _fix_phase(w / norm)
            change = np.linalg.norm(w - v)
            v = w
            # the remaining error is about change * r / (1 - r), r = lambda_2 / lambda_1
            ratio = min(change / prev_change, 0.999) if prev_change > 0 else 0.0
            if change < 1e-15 or change * ratio / (1.0 - ratio) < POWER_ITER_TOL and change < POWER_ITER_TOL:
                return v
            prev_change = change
        else:
            return v
    raise DegenerateInputError("power iteration collapsed for every start vector")
