"""Cursor traces inside stable chunks.

The background of a stable chunk is its per-pixel median frame.  Subtracting
it leaves the cursor (plus noise and any other moving thing); masked regions
such as the narrator's face are zeroed, and the brightest residual pixel is
taken as the cursor position when it clears a noise threshold.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import ValidationError, check_frames, check_same_shape
from .frame_io import Frame

@dataclass(frozen=True)
class TracePoint:
    t: float
    x: int
    y: int
    confidence: float


@dataclass(frozen=True)
class BBox:
    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValidationError(f"inverted bbox {self}")

    @property
    def width(self) -> int:
        return self.x_max - self.x_min

    @property
    def height(self) -> int:
        return self.y_max - self.y_min

    def contains(self, x, y) -> bool:
        return self.x_min <= x <= self.x_max and self.y_min <= y <= self.y_max

    def to_list(self):
        return [self.x_min, self.y_min, self.x_max, self.y_max]


@dataclass(frozen=True)
class MaskRegion:
    """Half-open pixel rectangle ``[x0, x1) x [y0, y1)`` to ignore."""

    rect: tuple
    source: str = "manual"

    def __post_init__(self):
        x0, y0, x1, y1 = (int(v) for v in self.rect)
        if x1 < x0 or y1 < y0 or x0 < 0 or y0 < 0:
            raise ValidationError(f"bad mask rectangle {self.rect}")
        object.__setattr__(self, "rect", (x0, y0, x1, y1))
        if self.source not in ("face_detector", "manual"):
            raise ValidationError(f"unknown mask source {self.source!r}")

    def clipped(self, width, height) -> "MaskRegion":
        x0, y0, x1, y1 = self.rect
        return MaskRegion((min(x0, width), min(y0, height), min(x1, width), min(y1, height)), self.source)

    def contains(self, x, y) -> bool:
        x0, y0, x1, y1 = self.rect
        return x0 <= x < x1 and y0 <= y < y1


@dataclass
class Trace:
    chunk_id: int
    points: list
    image_ref: Optional[str] = None
    chunk_interval: tuple = (0.0, 0.0)
    frame_size: tuple = (0, 0)  # (W, H)

    def __post_init__(self):
        if any(b.t < a.t for a, b in zip(self.points, self.points[1:])):
            raise ValidationError("trace points must be sorted by time")

    def to_records(self) -> list:
        return [{"chunk_id": self.chunk_id, "t": p.t, "x": p.x, "y": p.y, "confidence": p.confidence}
                for p in self.points]


def as_masks(masks) -> list:
    out = []
    for m in masks or ():
        out.append(m if isinstance(m, MaskRegion) else MaskRegion(tuple(m)))
    return out


def mask_array(shape, masks) -> Optional[np.ndarray]:
    masks = as_masks(masks)
    if not masks:
        return None
    arr = np.zeros(shape, dtype=bool)
    for m in masks:
        x0, y0, x1, y1 = m.rect
        arr[y0:y1, x0:x1] = True
    return arr


def kth_smallest_u8(planes, k: int) -> np.ndarray:
    """Per-pixel k-th smallest value (0-based) of equally shaped uint8 planes.

    Radix select, most significant bit first: eight counting passes over the
    planes, no stacking, so memory stays at a few planes.
    """
    shape = planes[0].shape
    prefix = np.zeros(shape, dtype=np.uint8)
    rank = np.full(shape, k, dtype=np.int32)
    count = np.empty(shape, dtype=np.int32)
    hit = np.empty(shape, dtype=bool)
    for bit in range(7, -1, -1):
        want = prefix >> bit
        count[...] = 0
        for p in planes:
            np.equal(p >> bit, want, out=hit)
            count += hit
        # values with this bit clear are not enough to reach rank: bit is set
        up = count <= rank
        prefix[up] |= np.uint8(1 << bit)
        rank[up] -= count[up]
    return prefix


def median_frame(frames: Sequence[Frame], color: bool = False) -> Frame:
    """Per-pixel median (lower median for even counts) of a chunk's frames."""
    if len(frames) == 0:
        raise ValidationError("median_frame needs at least one frame")
    frame_list = list(frames)
    k = (len(frame_list) - 1) // 2
    out = kth_smallest_u8([f.pixels for f in frame_list], k)
    rgb = None
    if color and all(f.color is not None for f in frame_list):
        rgb = np.stack([kth_smallest_u8([f.color[..., c] for f in frame_list], k) for c in range(3)], axis=-1)
    return Frame(frame_list[0].t, out, rgb)


def locate_cursor(frame: Frame, background: Frame, masks=(), noise_threshold: float = 25,
                  t: Optional[float] = None, _mask: Optional[np.ndarray] = None) -> Optional[TracePoint]:
    """Brightest residual pixel against the background, or None below threshold."""
    a = frame.pixels if isinstance(frame, Frame) else np.asarray(frame)
    b = background.pixels if isinstance(background, Frame) else np.asarray(background)
    check_same_shape(a, b)
    residual = np.abs(a.astype(np.int16) - b.astype(np.int16))
    mask = _mask if _mask is not None else mask_array(a.shape, masks)
    if mask is not None:
        residual[mask] = 0
    idx = int(np.argmax(residual))  # first maximum in row-major order
    peak = int(residual.flat[idx])
    if peak < noise_threshold:
        return None
    y, x = divmod(idx, a.shape[1])
    if t is None:
        t = frame.t if isinstance(frame, Frame) else 0.0
    return TracePoint(float(t), int(x), int(y), float(peak))


class CursorTracer(BaseEstimator):
    """Median-background cursor localiser for one stable chunk.

    ``fit`` learns the background (``background_``); ``predict`` returns one
    optional :class:`TracePoint` per frame with ``t`` relative to the first
    fitted frame.
    """

    def __init__(self, noise_threshold=25, min_trace_points=5):
        self.noise_threshold = noise_threshold
        self.min_trace_points = min_trace_points

    def fit(self, frames, y=None):
        check_frames(frames)
        self.background_ = median_frame(frames)
        self.t0_ = frames[0].t
        return self

    def predict(self, frames, masks=()):
        mask = mask_array(self.background_.pixels.shape, masks)
        return [locate_cursor(f, self.background_, noise_threshold=self.noise_threshold,
                              t=f.t - self.t0_, _mask=mask) for f in frames]


def extract_trace(chunk, frames, masks=(), noise_threshold: float = 25, min_trace_points: int = 5,
                  chunk_id: int = 0, image_ref: Optional[str] = None,
                  background: Optional[Frame] = None) -> Optional[Trace]:
    """Trace for one stable chunk, or None when too few points survive.

    Args:
        chunk: a StableChunk (frame_start/frame_end inclusive, t_start/t_end).
        frames: the whole video; only the chunk's frames are read.
        background: precomputed median frame of the chunk.
    """
    chunk_frames = frames[chunk.frame_start:chunk.frame_end + 1]
    if not isinstance(chunk_frames, list):
        chunk_frames = list(chunk_frames)
    tracer = CursorTracer(noise_threshold, min_trace_points)
    if background is None:
        tracer.fit(chunk_frames)
    else:
        tracer.background_ = background
    tracer.t0_ = chunk.t_start
    points = [p for p in tracer.predict(chunk_frames, masks) if p is not None]
    if len(points) < min_trace_points:
        return None
    f0 = chunk_frames[0]
    return Trace(chunk_id, points, image_ref, (chunk.t_start, chunk.t_end), (f0.width, f0.height))


def trace_to_bbox(trace) -> BBox:
    """Smallest axis-aligned box containing every trace point."""
    points = trace.points if isinstance(trace, Trace) else list(trace)
    if not points:
        raise ValidationError("cannot box an empty trace")
    xs = [p.x if isinstance(p, TracePoint) else p[0] for p in points]
    ys = [p.y if isinstance(p, TracePoint) else p[1] for p in points]
    return BBox(min(xs), min(ys), max(xs), max(ys))
