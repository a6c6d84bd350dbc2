"""Input validation helpers shared across the package."""

from __future__ import annotations

import numpy as np


class ValidationError(ValueError):
    """An input failed a structural or numeric check."""


class ConvergenceError(RuntimeError):
    """An iterative solver did not reach its tolerance."""


class DegenerateGeometryError(ValueError):
    """A point set cannot support the requested geometric construction."""


def as_float_array(x, name: str, ndim: int | None = None) -> np.ndarray:
    """Coerce to a C-contiguous float64 array, checking dimensionality."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ValidationError(f"{name}: expected {ndim}-d array, got {arr.ndim}-d")
    return arr


def check_finite(arr: np.ndarray, name: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return arr


def check_positive(value: float, name: str) -> float:
    if not value > 0:
        raise ValidationError(f"{name} must be > 0, got {value}")
    return value


def check_non_negative(value: float, name: str) -> float:
    if value < 0:
        raise ValidationError(f"{name} must be >= 0, got {value}")
    return value


def check_same_length(name_a: str, a, name_b: str, b) -> None:
    if len(a) != len(b):
        raise ValidationError(
            f"{name_a} and {name_b} must have equal length ({len(a)} != {len(b)})"
        )
