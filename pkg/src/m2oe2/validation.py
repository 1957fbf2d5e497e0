"""Input validation helpers shared by the data pipeline and estimators."""

from __future__ import annotations

import numpy as np


def as_float_matrix(name, arr, n_cols=None):
    """Coerce to a 2-D float64 array, raising a named error on failure."""
    out = np.asarray(arr, dtype=np.float64)
    if out.ndim == 1:
        out = out[:, None]
    if out.ndim != 2:
        raise ValueError(f"{name}: expected 1-D or 2-D input, got ndim={out.ndim}")
    if n_cols is not None and out.shape[1] != n_cols:
        raise ValueError(f"{name}: expected {n_cols} columns, got {out.shape[1]}")
    return out


def check_finite(name, arr):
    arr = np.asarray(arr)
    if not np.all(np.isfinite(arr)):
        bad = int(np.count_nonzero(~np.isfinite(arr)))
        raise ValueError(f"{name}: contains {bad} non-finite value(s)")
    return arr


def check_same_length(name_a, a, name_b, b):
    if len(a) != len(b):
        raise ValueError(
            f"{name_a} and {name_b} must align: lengths {len(a)} vs {len(b)}")


def check_positive_int(name, value, minimum=1):
    if int(value) != value or value < minimum:
        raise ValueError(f"{name}: expected an integer >= {minimum}, got {value!r}")
    return int(value)
