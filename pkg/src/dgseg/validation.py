"""Input validation for array-facing entry points."""

from __future__ import annotations

import numpy as np

__all__ = [
    "check_image_array",
    "check_mask_array",
    "check_domain_labels",
]

IGNORE_LABEL = 255


def check_image_array(X, channels: int | None = None) -> np.ndarray:
    """Coerce to float32 (n, C, H, W); rejects NaN/Inf and empty input."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ValueError(f"images must be (n, C, H, W), got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("empty image array")
    if channels is not None and X.shape[1] != channels:
        raise ValueError(f"expected {channels} channels, got {X.shape[1]}")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or Inf")
    return X


def check_mask_array(y, X: np.ndarray, num_classes: int | None = None) -> np.ndarray:
    """Coerce to int64 (n, H, W) matching X; labels in [0, K) or ignore."""
    y = np.asarray(y)
    if y.ndim == 2:
        y = y[None]
    if y.ndim != 3:
        raise ValueError(f"masks must be (n, H, W), got shape {y.shape}")
    expected = (X.shape[0], X.shape[2], X.shape[3])
    if y.shape != expected:
        raise ValueError(f"mask shape {y.shape} does not match images {expected}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(y == np.round(y)):
            raise ValueError("masks must be integer labels")
    y = y.astype(np.int64)
    scored = y[y != IGNORE_LABEL]
    if scored.size and scored.min() < 0:
        raise ValueError("negative labels")
    if num_classes is not None and scored.size and scored.max() >= num_classes:
        raise ValueError(f"labels must be < {num_classes} (or the ignore label)")
    return y


def check_domain_labels(domains, n: int) -> np.ndarray:
    """Coerce per-sample domain ids to int64 (n,); defaults to one domain."""
    if domains is None:
        return np.zeros(n, dtype=np.int64)
    domains = np.asarray(domains)
    if domains.shape != (n,):
        raise ValueError(f"domains must have shape ({n},), got {domains.shape}")
    return domains.astype(np.int64)
