"""Input validation helpers shared by the estimators and the functional API."""
from __future__ import annotations

from typing import Sequence

import numpy as np


def check_frames(X, dtype=np.float64) -> np.ndarray:
    """Return ``X`` as a finite 2-D array of shape (n_frames, dim) with dim >= 1."""
    arr = np.asarray(X, dtype=dtype)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D frames x dims array, got shape {arr.shape}")
    if arr.shape[1] < 1:
        raise ValueError("feature dimension must be >= 1")
    if not np.isfinite(arr).all():
        raise ValueError("feature values must be finite")
    return arr


def as_unit_ids(units: Sequence[int], n_units: int | None = None) -> np.ndarray:
    arr = np.asarray(units, dtype=np.int64).reshape(-1)
    if arr.size and arr.min() < 0:
        raise ValueError("unit ids must be non-negative")
    if n_units is not None and arr.size and arr.max() >= n_units:
        raise ValueError(f"unit id {int(arr.max())} out of range for {n_units} units")
    return arr


def check_same_dim(mats, dim: int | None = None) -> int:
    dims = {m.shape[1] for m in mats}
    if dim is not None:
        dims.add(dim)
    if len(dims) > 1:
        raise DimensionMismatchError(f"feature dimensions disagree: {sorted(dims)}")
    if not dims:
        raise ValueError("no feature matrices given")
    return dims.pop()


class DimensionMismatchError(ValueError):
    pass
