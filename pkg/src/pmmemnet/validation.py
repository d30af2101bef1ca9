"""Small input-validation helpers shared by the estimators and the CLI."""

from __future__ import annotations

import numpy as np


def as_float_matrix(x, name: str = "array", allow_nan: bool = False) -> np.ndarray:
    """Coerce to a 2-D float64 array, optionally rejecting non-finite entries."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if not allow_nan and not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_shape(arr: np.ndarray, expected: tuple[int, ...], name: str = "array") -> None:
    if tuple(arr.shape) != tuple(expected):
        raise ValueError(f"{name} has shape {arr.shape}, expected {expected}")


def check_positive(value, name: str) -> None:
    if value <= 0:
        raise ValueError(f"{name} must be positive, got {value}")
