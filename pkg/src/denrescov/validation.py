"""Input checks shared by the estimator API and the CLI."""
import numpy as np

from .errors import InputError, ShapeError


def check_image_batch(X, size=None, dtype=np.float32) -> np.ndarray:
    """Coerce ``X`` into a finite ``(n, size, size, 3)`` array.

    ``(n, size, size)`` grayscale batches are replicated to three channels.
    """
    X = np.asarray(X, dtype=dtype)
    if X.ndim == 3:
        X = np.repeat(X[..., None], 3, axis=3)
    if X.ndim != 4 or X.shape[3] != 3 or X.shape[1] != X.shape[2]:
        raise ShapeError(f"expected images shaped (n, s, s) or (n, s, s, 3), got {X.shape}")
    if size is not None and X.shape[1] != size:
        raise ShapeError(f"expected {size}x{size} images, got {X.shape[1]}x{X.shape[2]}")
    if not np.isfinite(X).all():
        raise InputError("images contain non-finite values")
    return X


def check_labels(y, n) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n:
        raise ShapeError(f"expected {n} labels, got shape {y.shape}")
    return y
