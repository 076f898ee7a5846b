"""Input validation helpers used by the estimator classes and functions."""

from __future__ import annotations

import numpy as np

from .errors import DataError


def as_float_array(x, name: str = "array", ndim: int | None = None) -> np.ndarray:
    """Coerce to a float64 ndarray and require finite entries."""
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise DataError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if arr.size and not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite values")
    return arr


def check_feature_matrix(frames, name: str = "features") -> np.ndarray:
    frames = as_float_array(frames, name=name, ndim=2)
    if frames.shape[0] < 1:
        raise DataError(f"{name} must contain at least one frame")
    return frames


def check_similarity_matrix(s, tol: float = 1e-6) -> np.ndarray:
    """Require a square symmetric matrix (within ``tol``)."""
    s = as_float_array(s, name="similarity matrix", ndim=2)
    m, n = s.shape
    if m != n:
        raise DataError(f"similarity matrix must be square, got {s.shape}")
    if m and np.max(np.abs(s - s.T)) > tol:
        raise DataError("similarity matrix is not symmetric")
    return s


def check_row_stochastic(labels, tol: float = 1e-6) -> np.ndarray:
    """Require rows to be non-negative and sum to one (within ``tol``)."""
    labels = as_float_array(labels, name="labels", ndim=2)
    if np.any(labels < -tol):
        raise DataError("label matrix has negative entries")
    sums = labels.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > tol):
        bad = int(np.argmax(np.abs(sums - 1.0)))
        raise DataError(f"label row {bad} sums to {sums[bad]:.6g}, expected 1")
    return labels


def check_positive(value, name: str):
    if value <= 0:
        raise DataError(f"{name} must be positive, got {value}")
    return value


def check_rng(rng) -> np.random.Generator:
    """Accept a Generator or a seed; always return a Generator."""
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)
