"""Input validation helpers shared by the numeric modules and estimators."""

from __future__ import annotations

import numpy as np


def as_float_array(x, name: str, ndim: int | None = None, shape: tuple | None = None) -> np.ndarray:
    """Coerce to a float64 array and check dimensionality/shape."""
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"{name}: expected {ndim} dims, got shape {arr.shape}")
    if shape is not None:
        for want, got in zip(shape, arr.shape):
            if want is not None and want != got:
                raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
    return arr


def check_finite(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains non-finite values")
    return arr


def check_positive(value, name: str):
    if not value > 0:
        raise ValueError(f"{name}: must be positive, got {value!r}")
    return value


def check_in_range(value, lo, hi, name: str):
    if not (lo <= value <= hi):
        raise ValueError(f"{name}: must be in [{lo}, {hi}], got {value!r}")
    return value
