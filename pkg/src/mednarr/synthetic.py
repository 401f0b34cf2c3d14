"""Synthetic screen-capture videos with known cursor paths and background motion.

Used as the ground-truth oracle for stability and trace extraction.  Frames are
rendered on demand from ``(spec, seed, index)`` so long videos never need to
live in memory.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from ._validation import ValidationError
from .frame_io import Frame

BG_LOW, BG_HIGH = 20, 140


@dataclass(frozen=True)
class MotionSegment:
    """Background change over ``[start, end)``.

    ``kind`` is ``"pan"`` (vertical scroll at ``speed`` px/s), ``"cut"`` (hard
    switch to a new texture at ``start``; ``end`` is ignored) or ``"strobe"``
    (a fresh texture on every frame).
    """

    start: float
    end: float
    kind: str = "pan"
    speed: float = 40.0


@dataclass(frozen=True)
class SyntheticSpec:
    width: int = 640
    height: int = 480
    fps: float = 10
    duration: float = 10.0
    background: int = 0
    cursor_path: tuple = ()
    motion_segments: tuple = ()
    noise_sigma: float = 0.0
    blob_radius: int = 2
    cursor_delta: int = 100
    blob_falloff: int = 20
    hidden: tuple = ()
    distractors: tuple = ()
    texture_sigma: float = 1.5
    texture_gain: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "cursor_path", tuple(tuple(map(float, p)) for p in self.cursor_path))
        object.__setattr__(self, "motion_segments", tuple(
            m if isinstance(m, MotionSegment) else MotionSegment(**m) if isinstance(m, dict) else MotionSegment(*m)
            for m in self.motion_segments))
        object.__setattr__(self, "hidden", tuple(tuple(map(float, h)) for h in self.hidden))
        object.__setattr__(self, "distractors", tuple(tuple(map(int, d)) for d in self.distractors))
        self.validate()

    def validate(self):
        if self.width < 8 or self.height < 8:
            raise ValidationError("synthetic frames must be at least 8x8")
        if self.fps <= 0 or self.duration <= 0:
            raise ValidationError("fps and duration must be positive")
        prev = -math.inf
        for t, x, y in self.cursor_path:
            if t < prev:
                raise ValidationError("cursor waypoints must be sorted by time")
            if not (0 <= x <= self.width and 0 <= y <= self.height):
                raise ValidationError(f"waypoint ({x}, {y}) lies outside the {self.width}x{self.height} frame")
            prev = t
        for m in self.motion_segments:
            if m.kind not in ("pan", "cut", "strobe"):
                raise ValidationError(f"unknown motion kind {m.kind!r}")
            if m.kind != "cut" and m.end <= m.start:
                raise ValidationError("motion segments need start < end")
        for x0, y0, x1, y1 in self.distractors:
            if not (0 <= x0 < x1 <= self.width and 0 <= y0 < y1 <= self.height):
                raise ValidationError(f"distractor {(x0, y0, x1, y1)} outside frame")
        if self.cursor_delta + BG_HIGH > 255:
            raise ValidationError("cursor_delta too large for the background range")

    @property
    def n_frames(self) -> int:
        return int(round(self.duration * self.fps))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["motion_segments"] = [asdict(m) for m in self.motion_segments]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        return cls(**d)


def cursor_position(spec: SyntheticSpec, t: float) -> Optional[tuple[float, float]]:
    """Linearly interpolated cursor position, or None when hidden or absent."""
    path = spec.cursor_path
    if not path:
        return None
    for a, b in spec.hidden:
        if a <= t < b:
            return None
    if t <= path[0][0]:
        return path[0][1], path[0][2]
    if t >= path[-1][0]:
        return path[-1][1], path[-1][2]
    for (t0, x0, y0), (t1, x1, y1) in zip(path, path[1:]):
        if t0 <= t <= t1:
            if t1 == t0:
                return x1, y1
            a = (t - t0) / (t1 - t0)
            return x0 + a * (x1 - x0), y0 + a * (y1 - y0)
    return path[-1][1], path[-1][2]


def cursor_pixel(spec: SyntheticSpec, t: float) -> Optional[tuple[int, int]]:
    pos = cursor_position(spec, t)
    if pos is None:
        return None
    x, y = (int(math.floor(v + 0.5)) for v in pos)
    if not (0 <= x < spec.width and 0 <= y < spec.height):
        return None
    return x, y


def _scroll_range(spec: SyntheticSpec) -> tuple[int, int]:
    """Lowest and highest scroll offsets reached (pans may scroll either way)."""
    lo = hi = cur = 0.0
    for m in spec.motion_segments:
        if m.kind == "pan":
            cur += m.speed * (m.end - m.start)
            lo, hi = min(lo, cur), max(hi, cur)
    return int(math.floor(lo)) - 1, int(math.ceil(hi)) + 1


def _make_texture(spec: SyntheticSpec, shape, key) -> np.ndarray:
    # tanh pushes values toward the range ends: high patch variance keeps
    # patch SSIM robust to noise and the small cursor blob
    rng = np.random.default_rng([spec.background, *key])
    z = gaussian_filter(rng.standard_normal(shape), spec.texture_sigma, mode="wrap")
    z /= z.std()
    half = (BG_HIGH - BG_LOW) / 2
    return np.rint(BG_LOW + half + half * np.tanh(spec.texture_gain * z)).astype(np.uint8)


@lru_cache(maxsize=8)
def _texture(spec: SyntheticSpec, texture_id: int) -> np.ndarray:
    lo, hi = _scroll_range(spec)
    return _make_texture(spec, (spec.height + hi - lo, spec.width), (texture_id, 0xB6))


def background_state(spec: SyntheticSpec, t: float, index: int) -> tuple[int, int]:
    """(texture id, vertical scroll offset) of the background at time t."""
    texture_id = 0
    offset = 0.0
    for k, m in enumerate(spec.motion_segments):
        if m.kind == "cut" and t >= m.start:
            texture_id = k + 1
        elif m.kind == "pan":
            offset += m.speed * (min(max(t, m.start), m.end) - m.start)
        elif m.kind == "strobe" and m.start <= t < m.end:
            texture_id = 10_000 + index
    return texture_id, int(math.floor(offset + 0.5))


def render_background(spec: SyntheticSpec, t: float, index: int) -> np.ndarray:
    texture_id, offset = background_state(spec, t, index)
    if texture_id >= 10_000:
        return _make_texture(spec, (spec.height, spec.width), (texture_id, 0x57))
    start = offset - _scroll_range(spec)[0]
    return _texture(spec, texture_id)[start:start + spec.height]


def blob_profile(spec: SyntheticSpec) -> np.ndarray:
    r = spec.blob_radius
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    ring = np.maximum(np.abs(yy), np.abs(xx))
    return (spec.cursor_delta - spec.blob_falloff * ring).astype(np.int16)


@dataclass
class GroundTruth:
    """What the generator actually rendered.

    Attributes:
        cursor: (n, 2) int array of the cursor centre pixel per frame, -1 where
            the cursor is hidden or off-frame.
        moving: per-frame flag, true while the background is changing.
        static_segments: maximal static time intervals, split at hard cuts.
        motion_segments: pan / strobe intervals in seconds.
        masks: distractor rectangles (x0, y0, x1, y1), exclusive upper bounds.
    """

    spec: SyntheticSpec
    seed: int
    cursor: np.ndarray
    moving: np.ndarray
    static_segments: list
    motion_segments: list
    cut_times: list
    masks: list = field(default_factory=list)

    def cursor_at(self, index: int) -> Optional[tuple[int, int]]:
        x, y = self.cursor[index]
        return None if x < 0 else (int(x), int(y))

    def background_at(self, index: int) -> np.ndarray:
        return render_background(self.spec, index / self.spec.fps, index)

    def to_json(self) -> str:
        return json.dumps({
            "spec": self.spec.to_dict(),
            "seed": self.seed,
            "cursor": self.cursor.tolist(),
            "moving": self.moving.astype(int).tolist(),
            "static_segments": self.static_segments,
            "motion_segments": self.motion_segments,
            "cut_times": self.cut_times,
            "masks": self.masks,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "GroundTruth":
        d = json.loads(text)
        return cls(
            spec=SyntheticSpec.from_dict(d["spec"]), seed=d["seed"],
            cursor=np.array(d["cursor"], dtype=np.int64).reshape(-1, 2),
            moving=np.array(d["moving"], dtype=bool),
            static_segments=[tuple(s) for s in d["static_segments"]],
            motion_segments=[tuple(s) for s in d["motion_segments"]],
            cut_times=d["cut_times"], masks=[tuple(m) for m in d["masks"]],
        )


class SyntheticVideo(Sequence[Frame]):
    """Lazily rendered frames; frame ``i`` depends only on (spec, seed, i)."""

    def __init__(self, spec: SyntheticSpec, seed: int):
        self.spec = spec
        self.seed = int(seed)
        self.fps = Fraction(spec.fps).limit_denominator(1_000_000)
        self._profile = blob_profile(spec)

    @property
    def duration(self) -> float:
        return self.spec.n_frames / self.spec.fps

    def __len__(self):
        return self.spec.n_frames

    def __getitem__(self, index):
        if isinstance(index, slice):
            return [self[i] for i in range(*index.indices(len(self)))]
        if index < 0:
            index += len(self)
        if not 0 <= index < len(self):
            raise IndexError(index)
        return Frame(float(index / self.fps), self.render(index))

    def render(self, index: int) -> np.ndarray:
        spec = self.spec
        t = float(index / self.fps)
        img = render_background(spec, t, index).astype(np.int16)
        if spec.distractors:
            rng = np.random.default_rng([self.seed, index, 0xFACE])
            for x0, y0, x1, y1 in spec.distractors:
                img[y0:y1, x0:x1] = rng.integers(BG_LOW, BG_HIGH + 1, size=(y1 - y0, x1 - x0))
        px = cursor_pixel(spec, t)
        if px is not None:
            self._stamp(img, px)
        if spec.noise_sigma > 0:
            rng = np.random.default_rng([self.seed, index])
            noise = rng.standard_normal(img.shape, dtype=np.float32) * np.float32(spec.noise_sigma)
            img = np.rint(img + noise)
        return np.clip(img, 0, 255).astype(np.uint8)

    def _stamp(self, img, px):
        r = self.spec.blob_radius
        x, y = px
        h, w = img.shape
        ya, yb = max(y - r, 0), min(y + r + 1, h)
        xa, xb = max(x - r, 0), min(x + r + 1, w)
        img[ya:yb, xa:xb] += self._profile[ya - (y - r):yb - (y - r), xa - (x - r):xb - (x - r)]

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


def _complement(intervals, total):
    out, cur = [], 0.0
    for a, b in sorted(intervals):
        if a > cur:
            out.append((cur, a))
        cur = max(cur, b)
    if cur < total:
        out.append((cur, total))
    return out


def ground_truth(spec: SyntheticSpec, seed: int) -> GroundTruth:
    n = spec.n_frames
    fps = Fraction(spec.fps).limit_denominator(1_000_000)
    cursor = np.full((n, 2), -1, dtype=np.int64)
    moving = np.zeros(n, dtype=bool)
    motion = sorted((m.start, m.end) for m in spec.motion_segments if m.kind != "cut")
    motion = [(a, min(b, spec.duration)) for a, b in motion if a < spec.duration]
    cuts = sorted(m.start for m in spec.motion_segments if m.kind == "cut" and 0 < m.start < spec.duration)
    for i in range(n):
        t = float(i / fps)
        px = cursor_pixel(spec, t)
        if px is not None:
            cursor[i] = px
        moving[i] = any(a <= t < b for a, b in motion)
    static = []
    for a, b in _complement(motion, spec.duration):
        edges = [a] + [c for c in cuts if a < c < b] + [b]
        static.extend(zip(edges, edges[1:]))
    return GroundTruth(
        spec=spec, seed=int(seed), cursor=cursor, moving=moving,
        static_segments=[(float(a), float(b)) for a, b in static],
        motion_segments=[(float(a), float(b)) for a, b in motion],
        cut_times=[float(c) for c in cuts],
        masks=[tuple(d) for d in spec.distractors],
    )


def generate_synthetic(spec: SyntheticSpec, seed: int) -> tuple[SyntheticVideo, GroundTruth]:
    """Build a deterministic synthetic video and its ground truth."""
    spec.validate()
    return SyntheticVideo(spec, seed), ground_truth(spec, seed)


def random_spec(seed: int, noise_sigma: float = 0.0, duration: float = 30.0, width: int = 640,
                height: int = 480, fps: float = 10, face: Optional[bool] = None) -> SyntheticSpec:
    """A random but reproducible screen-capture layout.

    Three or four static stretches of at least 4 s are separated by a pan, a
    strobe or a hard cut.  The cursor wanders between random waypoints, is
    hidden for one second with probability 1/2, and an optional "face"
    rectangle flickers in a corner.
    """
    rng = np.random.default_rng([seed, 0x5EED])
    n_events = int(rng.integers(2, 4))
    gaps = {"pan": (1.5, 3.0), "strobe": (1.0, 2.0), "cut": (0.0, 0.0)}
    kinds = [str(k) for k in rng.choice(["pan", "strobe", "cut"], size=n_events)]
    busy = sum(gaps[k][1] for k in kinds)
    slack = duration - busy - 4.0 * (n_events + 1)
    if slack < 0:
        raise ValidationError("duration too short for the random layout")
    weights = rng.dirichlet(np.ones(n_events + 1)) * slack
    segments, t = [], 0.0
    for i, kind in enumerate(kinds):
        t += 4.0 + float(weights[i])
        lo, hi = gaps[kind]
        length = round(float(rng.uniform(lo, hi)), 1)
        t = round(t, 1)
        speed = float(rng.uniform(30, 80)) * (1 if rng.random() < 0.5 else -1)
        segments.append(MotionSegment(t, t + length if kind != "cut" else t, kind, speed))
        t += length
    margin = 12
    waypoints, t = [], 0.0
    while t < duration:
        waypoints.append((round(t, 2), float(rng.uniform(margin, width - margin)),
                          float(rng.uniform(margin, height - margin))))
        t += float(rng.uniform(0.8, 2.0))
    waypoints.append((duration, float(rng.uniform(margin, width - margin)),
                      float(rng.uniform(margin, height - margin))))
    hidden = ()
    if rng.random() < 0.5:
        h0 = round(float(rng.uniform(1.0, duration - 2.0)), 1)
        hidden = ((h0, h0 + 1.0),)
    if face is None:
        face = bool(rng.random() < 0.5)
    distractors = ()
    if face:
        fw, fh = 96, 120
        corner = int(rng.integers(4))
        x0 = 8 if corner % 2 == 0 else width - fw - 8
        y0 = 8 if corner < 2 else height - fh - 8
        distractors = ((x0, y0, x0 + fw, y0 + fh),)
    return SyntheticSpec(width=width, height=height, fps=fps, duration=duration, cursor_path=tuple(waypoints),
                         motion_segments=tuple(segments), noise_sigma=noise_sigma, hidden=hidden,
                         distractors=distractors)
