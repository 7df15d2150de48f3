"""Input validation helpers shared by estimators and the CLI."""
from __future__ import annotations

import numpy as np
from sklearn.utils import check_array

__all__ = ["check_observations", "check_vector"]


def check_observations(X, obs_dim: int) -> np.ndarray:
    """Return ``X`` as a finite float64 array of shape ``(n, obs_dim)``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    X = check_array(X, dtype=np.float64, ensure_all_finite=True)
    if X.shape[1] != obs_dim:
        raise ValueError(f"expected observations with {obs_dim} features, got {X.shape[1]}")
    return X


def check_vector(v, size: int | None = None, name: str = "vector") -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).ravel()
    if size is not None and v.size != size:
        raise ValueError(f"{name} must have {size} entries, got {v.size}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} must be finite")
    return v
