"""Input checks shared by the estimators."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array


def as_2d_float(X, name="X", allow_1d=True):
    """Finite float64 2-D array; a 1-D input is read as a single column."""
    arr = np.asarray(X, dtype=float)
    if arr.ndim == 1 and allow_1d:
        arr = arr[:, None]
    return check_array(arr, dtype=np.float64, ensure_all_finite=True, input_name=name)


def check_consistent_columns(X, expected):
    if X.shape[1] != expected:
        raise ValueError(f"X has {X.shape[1]} columns, estimator expects {expected}")


def check_nonnegative(X, name="X"):
    if np.any(X < 0):
        raise ValueError(f"{name} contains negative distances")
    return X
