"""Input checks shared by the estimator wrappers."""
from __future__ import annotations

import numpy as np


def check_ecg_batch(X, n_leads: int = 12, length=None, dtype=np.float32) -> np.ndarray:
    """Return ``X`` as a finite (N, leads, T) array of ``dtype``."""
    X = np.asarray(X)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3 or X.shape[1] != n_leads:
        raise ValueError(f"expected ECG batch of shape (N, {n_leads}, T), got {X.shape}")
    if length is not None and X.shape[2] != length:
        raise ValueError(f"expected {length} samples per lead, got {X.shape[2]}")
    if not np.issubdtype(X.dtype, np.number):
        raise TypeError(f"ECG values must be numeric, got dtype {X.dtype}")
    X = X.astype(dtype, copy=False)
    if not np.all(np.isfinite(X)):
        raise ValueError("ECG batch contains NaN or infinite values")
    return X


def check_binary_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y).reshape(-1)
    if y.shape[0] != n:
        raise ValueError(f"got {y.shape[0]} labels for {n} samples")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return y.astype(np.int8)


def check_feature_matrix(F, n: int) -> np.ndarray:
    F = np.asarray(F, dtype=np.float32)
    if F.ndim != 2 or F.shape[0] != n:
        raise ValueError(f"expected a ({n}, F) feature matrix, got {F.shape}")
    if not np.all(np.isfinite(F)):
        raise ValueError("feature matrix contains NaN or infinite values")
    return F
