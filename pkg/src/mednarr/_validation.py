"""Input validation helpers shared by the estimators and pipeline stages."""

from __future__ import annotations

import numbers

import numpy as np


class ValidationError(ValueError):
    pass


def check_plane(pixels, name="pixels"):
    """Return ``pixels`` as a 2-D uint8 array, raising on anything else."""
    arr = np.asarray(pixels)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be a 2-D luma plane, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValidationError(f"{name} must be at least 1x1")
    if arr.dtype != np.uint8:
        if not np.issubdtype(arr.dtype, np.integer) or arr.min() < 0 or arr.max() > 255:
            raise ValidationError(f"{name} must hold 8-bit samples")
        arr = arr.astype(np.uint8)
    return arr


def check_same_shape(a, b, what="frames"):
    if np.shape(a) != np.shape(b):
        raise ValidationError(f"{what} differ in size: {np.shape(a)} vs {np.shape(b)}")


def check_positive(value, name, strict=True):
    if not isinstance(value, numbers.Real) or isinstance(value, bool):
        raise ValidationError(f"{name} must be a real number, got {value!r}")
    if strict and not value > 0:
        raise ValidationError(f"{name} must be > 0, got {value}")
    if not strict and value < 0:
        raise ValidationError(f"{name} must be >= 0, got {value}")
    return value


def check_fraction(value, name):
    check_positive(value, name, strict=False)
    if value > 1:
        raise ValidationError(f"{name} must be in [0, 1], got {value}")
    return value


def check_interval(start, end, name="interval", allow_empty=False):
    if end < start or (not allow_empty and end == start):
        raise ValidationError(f"{name} must satisfy start < end, got ({start}, {end})")
    return start, end


def check_frames(frames, min_count=1):
    """Validate a frame sequence: non-empty, equal sizes, non-decreasing time."""
    n = len(frames)
    if n < min_count:
        raise ValidationError(f"need at least {min_count} frame(s), got {n}")
    first = frames[0]
    prev_t = first.t
    for i in range(1, n):
        f = frames[i]
        if (f.height, f.width) != (first.height, first.width):
            raise ValidationError(f"frame {i} is {f.width}x{f.height}, expected {first.width}x{first.height}")
        if f.t < prev_t:
            raise ValidationError(f"frame {i} goes back in time ({f.t} < {prev_t})")
        prev_t = f.t
    return frames
