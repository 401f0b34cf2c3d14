"""Independent reference implementations used as test oracles.

Each one is written straight from the definition, with plain Python loops
where practical, and shares no code with the package under test.
"""

import math

import numpy as np
from scipy.ndimage import correlate1d

C1 = (0.01 * 255) ** 2
C2 = (0.03 * 255) ** 2


def ssim_reference(a, b) -> float:
    """Single-window SSIM over whole patches, population statistics."""
    xs = [float(v) for v in np.asarray(a).ravel()]
    ys = [float(v) for v in np.asarray(b).ravel()]
    n = len(xs)
    mx = math.fsum(xs) / n
    my = math.fsum(ys) / n
    vx = math.fsum((x - mx) ** 2 for x in xs) / n
    vy = math.fsum((y - my) ** 2 for y in ys) / n
    cxy = math.fsum((x - mx) * (y - my) for x, y in zip(xs, ys)) / n
    return ((2 * mx * my + C1) * (2 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2))


def median_reference(planes) -> np.ndarray:
    """Per-pixel lower median by sorting each pixel's values."""
    stack = np.stack([np.asarray(p) for p in planes])
    n, h, w = stack.shape
    out = np.empty((h, w), dtype=np.uint8)
    for y in range(h):
        for x in range(w):
            out[y, x] = sorted(int(v) for v in stack[:, y, x])[(n - 1) // 2]
    return out


def bbox_reference(points):
    """Exhaustive min/max over (x, y) pairs."""
    x_min = y_min = math.inf
    x_max = y_max = -math.inf
    for x, y in points:
        x_min, x_max = min(x_min, x), max(x_max, x)
        y_min, y_max = min(y_min, y), max(y_max, y)
    return x_min, y_min, x_max, y_max


def abs_diff_reference(a, b) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    out = np.zeros(a.shape, dtype=np.uint8)
    for idx in np.ndindex(a.shape):
        out[idx] = abs(int(a[idx]) - int(b[idx]))
    return out


def blur_reference(image, sigma: float) -> np.ndarray:
    """Separable Gaussian with half-sample symmetric borders, via scipy."""
    radius = max(1, math.ceil(3 * sigma))
    taps = np.array([math.exp(-0.5 * (i / sigma) ** 2) for i in range(-radius, radius + 1)])
    taps /= taps.sum()
    img = np.asarray(image, dtype=np.float64)
    tmp = correlate1d(img, taps, axis=0, mode="reflect")
    return correlate1d(tmp, taps, axis=1, mode="reflect")


def iou(a, b) -> float:
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = max(a[1], b[1]) - min(a[0], b[0])
    return inter / union if union > 0 else 0.0


def overlap(a, b) -> float:
    return max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
