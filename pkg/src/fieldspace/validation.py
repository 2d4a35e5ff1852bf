"""Input validation helpers shared by the estimators."""
import numpy as np
from sklearn.utils.validation import check_array

from .healpix import level_from_npix, npix


def check_fields(X, level=None, allow_1d=False, dtype=np.float64):
    """Validate a ``(n_samples, n_pixels)`` array of HEALPix fields.

    A 1-d array is promoted to a single row when ``allow_1d`` is set. When
    ``level`` is given the pixel count must match it exactly.
    """
    X = np.asarray(X)
    if X.ndim == 1 and allow_1d:
        X = X[None, :]
    X = check_array(X, dtype=dtype, ensure_all_finite=True)
    if level is None:
        level_from_npix(X.shape[1])
    elif X.shape[1] != npix(level):
        raise ValueError(f"expected {npix(level)} pixels (level {level}), got {X.shape[1]}")
    return X


def check_same_shape(a, b, what="arrays"):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"{what} differ in shape: {a.shape} vs {b.shape}")
    return a, b


def check_finite(a, what="input"):
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{what} contains non-finite values")
    return a
