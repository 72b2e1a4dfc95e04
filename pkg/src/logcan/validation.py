"""Input checks shared by the estimator and the command line."""
from __future__ import annotations

import numpy as np

from .tensor import IGNORE_INDEX


def check_images(X) -> np.ndarray:
    """Return ``X`` as a C-contiguous float32 ``N x 3 x H x W`` array with H, W divisible by 32."""
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[1] != 3:
        raise ValueError(f"expected images of shape N x 3 x H x W, got {X.shape}")
    if X.shape[2] % 32 or X.shape[3] % 32:
        raise ValueError(f"image extents {X.shape[2]}x{X.shape[3]} must be divisible by 32")
    if not np.issubdtype(X.dtype, np.number):
        raise ValueError(f"images must be numeric, got dtype {X.dtype}")
    X = np.ascontiguousarray(X, dtype=np.float32)
    if not np.isfinite(X).all():
        raise ValueError("images contain NaN or infinite values")
    return X


def check_labels(y, X: np.ndarray, classes: int) -> np.ndarray:
    """Integer ``N x H x W`` labels in ``[0, classes)`` or the ignore index."""
    y = np.asarray(y)
    expected = (X.shape[0],) + X.shape[2:]
    if y.ndim == 2 and X.shape[0] == 1:
        y = y[None]
    if y.shape != expected:
        raise ValueError(f"labels have shape {y.shape}, expected {expected}")
    if np.issubdtype(y.dtype, np.floating):
        if not np.array_equal(y, np.round(y)):
            raise ValueError("labels must be integer valued")
    yi = y.astype(np.int64)
    bad = (yi != IGNORE_INDEX) & ((yi < 0) | (yi >= classes))
    if bad.any():
        raise ValueError(f"label {int(yi[bad][0])} out of range for {classes} classes")
    return yi


def parse_shape(text: str) -> tuple[int, ...]:
    """``"2048x128x128"`` -> ``(2048, 128, 128)``."""
    try:
        dims = tuple(int(t) for t in text.lower().split("x"))
    except ValueError:
        raise ValueError(f"bad shape {text!r}; expected e.g. 2048x128x128") from None
    if not dims or min(dims) < 1:
        raise ValueError(f"bad shape {text!r}; extents must be positive")
    return dims
