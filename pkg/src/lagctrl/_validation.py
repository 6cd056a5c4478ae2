"""Small argument checks shared across modules."""

import numpy as np

from .exceptions import ParameterError


def check_points(x, name="points", allow_empty=False) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1 and x.size == 3:
        x = x.reshape(1, 3)
    if x.ndim != 2 or x.shape[1] != 3:
        raise ParameterError(f"{name} must have shape (n, 3), got {x.shape}")
    if not allow_empty and len(x) == 0:
        raise ParameterError(f"{name} must not be empty")
    if not np.all(np.isfinite(x)):
        raise ParameterError(f"{name} contains non-finite values")
    return x


def check_positive(value, name):
    if not (np.isfinite(value) and value > 0):
        raise ParameterError(f"{name} must be positive, got {value!r}")
    return value


def check_vector(v, name, size=3):
    v = np.asarray(v, dtype=float).reshape(-1)
    if v.size != size or not np.all(np.isfinite(v)):
        raise ParameterError(f"{name} must be a finite {size}-vector")
    return v
