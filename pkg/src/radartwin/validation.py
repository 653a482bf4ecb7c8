"""Input validation helpers used by the estimator-style classes."""

import numpy as np

from .errors import ConfigurationError


def check_power_map(power, name="power", allow_negative=False) -> np.ndarray:
    """Validate a 2-D finite power map and return it as float64.

    ``allow_negative`` admits log/dB-scaled maps (peak search does not care
    about the scale, only monotonicity).
    """
    arr = np.asarray(power, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise ConfigurationError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ConfigurationError(f"{name} contains non-finite values")
    if not allow_negative and np.any(arr < 0):
        raise ConfigurationError(f"{name} contains negative power values")
    return arr


def check_map_stack(maps, name="maps") -> np.ndarray:
    """Validate a stack of power maps, shape (n, rows, cols)."""
    arr = np.asarray(maps, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[np.newaxis]
    if arr.ndim != 3 or arr.shape[0] == 0:
        raise ConfigurationError(f"{name} must have shape (n, rows, cols), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ConfigurationError(f"{name} contains non-finite values")
    return arr


def check_bin_pairs(values, name="values") -> np.ndarray:
    """Validate an (n, 2) array of (range_bin, doppler_bin) pairs."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 2:
        arr = arr[np.newaxis]
    if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] == 0:
        raise ConfigurationError(f"{name} must have shape (n, 2), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ConfigurationError(f"{name} contains non-finite values")
    return arr


def check_same_length(a, b, name_a="estimates", name_b="truths"):
    if len(a) != len(b):
        raise ConfigurationError(
            f"{name_a} and {name_b} must have equal length ({len(a)} vs {len(b)})"
        )


def require(condition: bool, message: str):
    """Raise :class:`ConfigurationError` unless ``condition`` holds."""
    if not condition:
        raise ConfigurationError(message)
