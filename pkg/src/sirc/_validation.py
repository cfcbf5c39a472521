"""Input validation helpers shared by the estimators."""

from __future__ import annotations

import numpy as np
from sklearn.utils import check_array

from sirc.domain import ValidationError


def check_vector(v, dimension: int | None = None) -> np.ndarray:
    """Coerce ``v`` to a finite 1-d float array, optionally of fixed length."""
    try:
        arr = np.asarray(v, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"not a numeric vector: {exc}") from exc
    if arr.ndim != 1 or arr.shape[0] == 0:
        raise ValidationError(f"expected a non-empty 1-d vector, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValidationError("vector contains NaN or infinity")
    if dimension is not None and arr.shape[0] != dimension:
        raise ValidationError(f"vector dimension {arr.shape[0]} does not match expected {dimension}")
    return arr


def check_matrix(X, dimension: int | None = None) -> np.ndarray:
    try:
        arr = check_array(X, dtype=np.float64)
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    if dimension is not None and arr.shape[1] != dimension:
        raise ValidationError(f"vector dimension {arr.shape[1]} does not match expected {dimension}")
    return arr


def check_unit_interval(value: float, name: str, *, open_low: bool = False) -> float:
    value = float(value)
    low_ok = value > 0 if open_low else value >= 0
    if not (low_ok and value <= 1 and np.isfinite(value)):
        bound = "(0, 1]" if open_low else "[0, 1]"
        raise ValidationError(f"{name}={value} must lie in {bound}")
    return value
