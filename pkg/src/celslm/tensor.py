"""Dense 64-bit matrix helpers shared by every other module.

A "Matrix" is a C-contiguous 2-D ``numpy.ndarray`` of ``float64``. Products and
softmax go through :mod:`celslm.kernels` so their accumulation order is fixed.
"""
import math

import numpy as np

from . import kernels
from .errors import DegenerateInputError, ShapeError


def as_matrix(x, name="matrix"):
    """Coerce ``x`` to a contiguous float64 2-D array, rejecting NaN/Inf."""
    m = np.ascontiguousarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} has non-finite entries")
    return m


def as_vector(x, name="vector"):
    v = np.ascontiguousarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {v.shape}")
    return v


def _check_finite(m, op):
    if not np.all(np.isfinite(m)):
        raise FloatingPointError(f"{op} produced non-finite values")
    return m


def matmul(a, b):
    """Matrix product with row-by-row, left-to-right accumulation."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return _check_finite(kernels.matmul(a, b), "matmul")


def softmax_rows(m):
    """Row-wise softmax computed with max subtraction."""
    m = as_matrix(m)
    if m.size == 0:
        raise ShapeError("softmax_rows of an empty matrix")
    return kernels.softmax_rows(m)


def frobenius_norm(m):
    m = np.asarray(m, dtype=np.float64)
    total = 0.0
    for v in m.ravel().tolist():
        total += v * v
    return math.sqrt(total)


def pearson_corr(x, y):
    """Pearson correlation of two equal-length vectors.

    Raises :class:`DegenerateInputError` ("zero variance") if either input is
    constant, since the coefficient is undefined there.
    """
    x = as_vector(x, "x")
    y = as_vector(y, "y")
    if x.shape != y.shape:
        raise ShapeError(f"pearson_corr length mismatch: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise ShapeError("pearson_corr needs at least 2 samples")
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(xc @ xc)
    syy = float(yc @ yc)
    # relative test: a constant vector leaves only rounding residue after centering
    if sxx <= 1e-24 * max(float(x @ x), 1e-300) or syy <= 1e-24 * max(float(y @ y), 1e-300):
        raise DegenerateInputError("zero variance")
    r = float(xc @ yc) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))
