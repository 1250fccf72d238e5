"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""

import numpy as np

from .exceptions import InvalidArgumentError


def check_vector(x, name="vector", dim=None, allow_empty=False):
    """Return ``x`` as a finite 1-D float64 array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise InvalidArgumentError(f"{name} must be 1-D, got shape {arr.shape}")
    if not allow_empty and arr.size == 0:
        raise InvalidArgumentError(f"{name} must be non-empty")
    if dim is not None and arr.shape[0] != dim:
        raise InvalidArgumentError(f"{name} must have dimension {dim}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} contains NaN or Inf")
    return arr


def check_matrix(x, name="matrix", shape=None):
    """Return ``x`` as a finite 2-D float64 array, optionally of a given shape."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise InvalidArgumentError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    if shape is not None and arr.shape != tuple(shape):
        raise InvalidArgumentError(f"{name} must have shape {tuple(shape)}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} contains NaN or Inf")
    return arr


def check_points(points, name="points"):
    """Stack a sequence of equal-length vectors into an (m, d) array."""
    try:
        arr = np.asarray(points, dtype=np.float64)
    except ValueError as exc:
        raise InvalidArgumentError(f"{name} must all share one dimension") from exc
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise InvalidArgumentError(f"{name} must be a non-empty list of vectors")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} contains NaN or Inf")
    return arr


def check_probabilities(p, name="probs", atol=1e-6):
    """Validate a probability vector: nonnegative entries summing to one."""
    arr = check_vector(p, name)
    if np.any(arr < 0):
        raise InvalidArgumentError(f"{name} has negative entries")
    if abs(arr.sum() - 1.0) > atol:
        raise InvalidArgumentError(f"{name} sums to {arr.sum()!r}, expected 1")
    return arr


def check_positive_int(value, name, minimum=1):
    if isinstance(value, bool) or int(value) != value or value < minimum:
        raise InvalidArgumentError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_in_open_unit(value, name):
    value = float(value)
    if not 0.0 < value < 1.0:
        raise InvalidArgumentError(f"{name} must lie in (0, 1), got {value!r}")
    return value
