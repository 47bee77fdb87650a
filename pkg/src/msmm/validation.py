"""Input validation helpers shared by the fitting routines."""

import numpy as np

from .exceptions import RankDeficientDesign


def as_float_vector(x, name="array"):
    """Coerce to a finite 1-D float array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def as_count_vector(y, name="outcome"):
    """Coerce to a 1-D vector of non-negative integer counts."""
    arr = np.asarray(y)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-dimensional, got shape {arr.shape}")
    flt = arr.astype(np.float64)
    if not np.all(np.isfinite(flt)):
        raise ValueError(f"{name} contains non-finite values")
    if np.any(flt != np.round(flt)):
        raise ValueError(f"{name} must contain integers")
    if np.any(flt < 0):
        raise ValueError(f"{name} must be non-negative")
    return flt.astype(np.int64)


def as_float_matrix(x, name="matrix"):
    """Coerce to a finite 2-D float array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_full_rank(design, name="design"):
    """Raise RankDeficientDesign unless the matrix has full column rank."""
    design = as_float_matrix(design, name)
    if design.shape[0] < design.shape[1]:
        raise RankDeficientDesign(
            f"{name} has more columns ({design.shape[1]}) than rows ({design.shape[0]})"
        )
    rank = np.linalg.matrix_rank(design)
    if rank < design.shape[1]:
        raise RankDeficientDesign(
            f"{name} has rank {rank} < {design.shape[1]} columns"
        )
    return design


def is_binary_treatment(z):
    """True when every entry is 0 or 1 and both arms are present."""
    z = np.asarray(z, dtype=np.float64)
    values = np.unique(z)
    return values.size == 2 and set(values.tolist()) == {0.0, 1.0}
