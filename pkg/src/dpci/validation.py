"""Input validation helpers shared by the estimator and the lower-level API."""

from __future__ import annotations

import numpy as np

from .data import Sequence


def check_point_cloud(x, name: str = "X") -> np.ndarray:
    """Coerce to a finite N x 3 float array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{name} must be an N x 3 array of coordinates, got shape {arr.shape}")
    if arr.shape[0] < 1:
        raise ValueError(f"{name} must contain at least one point")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite coordinates")
    return arr


def check_pair(p0, p1) -> tuple[np.ndarray, np.ndarray]:
    """Validate two clouds that must share a point count."""
    a = check_point_cloud(p0, "p0")
    b = check_point_cloud(p1, "p1")
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"point counts differ: {a.shape[0]} vs {b.shape[0]}")
    return a, b


def check_time(t) -> float:
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"interpolation time must lie in [0, 1], got {t}")
    return t


def as_sequences(X) -> list[Sequence]:
    """Accept a Sequence, a list of Sequences, or an F x N x 3 array."""
    if isinstance(X, Sequence):
        return [X]
    if isinstance(X, (list, tuple)) and X and isinstance(X[0], Sequence):
        return list(X)
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 3:
        return [Sequence(frames=[check_point_cloud(f) for f in arr], name="array")]
    raise ValueError(
        "X must be a Sequence, a list of Sequences, or an F x N x 3 array of frames")
