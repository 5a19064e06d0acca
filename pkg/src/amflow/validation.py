"""Input checks shared by the estimators and the CLI."""
from __future__ import annotations

import numbers

import numpy as np

from .synth import LatentVideo


def check_video(X, name="X"):
    """Coerce ``X`` (LatentVideo or array-like ``(F, C, h, w)``) to a finite LatentVideo."""
    if isinstance(X, LatentVideo):
        return X
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim != 4:
        raise ValueError(f"{name} must have shape (F, C, h, w); got {arr.shape}")
    try:
        return LatentVideo(arr)
    except ValueError as exc:
        raise ValueError(f"{name}: {exc}") from exc


def check_int(value, name, minimum=None, odd=False):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise TypeError(f"{name} must be an integer, got {type(value).__name__}")
    if minimum is not None and value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    if odd and value % 2 == 0:
        raise ValueError(f"{name} must be odd, got {value}")
    return int(value)


def check_positive(value, name):
    if not isinstance(value, numbers.Real) or not np.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be a positive finite number, got {value!r}")
    return float(value)


def check_choice(value, name, choices):
    if value not in choices:
        raise ValueError(f"{name} must be one of {tuple(choices)}, got {value!r}")
    return value


def check_same_grid(a, b):
    if (a.frames, a.height, a.width) != (b.frames, b.height, b.width):
        raise ValueError(f"grids differ: {a.shape} vs {b.shape}")
