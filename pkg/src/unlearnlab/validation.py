"""Input validation helpers shared across the package."""

from __future__ import annotations

import numpy as np


def check_positive(value, name: str):
    """Reject non-positive numbers; returns the value unchanged."""
    if not value > 0:
        raise ValueError(f"{name} must be positive, got {value!r}")
    return value


def check_count(value, name: str) -> int:
    """Reject anything that is not a positive integer."""
    if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_probability(value, name: str, include_zero: bool = False) -> float:
    lo_ok = value >= 0 if include_zero else value > 0
    if not (lo_ok and value <= 1):
        bound = "[0, 1]" if include_zero else "(0, 1]"
        raise ValueError(f"{name} must lie in {bound}, got {value!r}")
    return float(value)


def check_same_length(name_a: str, a, name_b: str, b):
    if len(a) != len(b):
        raise ValueError(
            f"{name_a} and {name_b} must have equal length ({len(a)} != {len(b)})"
        )


def check_vector(value, name: str, length: int | None = None) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be a 1-D array, got shape {arr.shape}")
    if length is not None and arr.shape[0] != length:
        raise ValueError(f"{name} must have length {length}, got {arr.shape[0]}")
    return arr


def check_nonempty(seq, name: str):
    if len(seq) == 0:
        raise ValueError(f"{name} must not be empty")
    return seq
