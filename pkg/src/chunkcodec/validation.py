"""Input validation helpers shared by the estimators and the CLI."""

from __future__ import annotations

import numpy as np
from sklearn.exceptions import NotFittedError

from .data import NUM_COMMAND_DIMS

__all__ = ["check_chunk_array", "check_feature_matrix", "check_is_fitted"]


def check_chunk_array(X, chunk_len: int | None = None, name: str = "X") -> np.ndarray:
    """Coerce to a finite (n_chunks, N, 12) float64 array.

    A single (N, 12) chunk is promoted to a batch of one.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3 or X.shape[-1] != NUM_COMMAND_DIMS:
        raise ValueError(
            f"{name} must be (n_chunks, N, {NUM_COMMAND_DIMS}) or (N, {NUM_COMMAND_DIMS}), "
            f"got shape {X.shape}"
        )
    if chunk_len is not None and X.shape[1] != chunk_len:
        raise ValueError(f"{name} chunk length {X.shape[1]} != configured chunk_len {chunk_len}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    return np.ascontiguousarray(X)


def check_feature_matrix(X, width: int | None = None, name: str = "X") -> np.ndarray:
    """Coerce to a finite (n, width) float64 matrix; a vector becomes one row."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None]
    if X.ndim != 2:
        raise ValueError(f"{name} must be a 2-d feature matrix, got shape {X.shape}")
    if width is not None and X.shape[1] != width:
        raise ValueError(f"{name} feature width {X.shape[1]} != expected {width}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    return np.ascontiguousarray(X)


def check_is_fitted(estimator, attribute: str):
    if not hasattr(estimator, attribute):
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted yet; call fit before using this method"
        )
