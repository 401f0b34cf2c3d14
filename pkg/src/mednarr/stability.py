"""Stable-chunk detection.

Consecutive frames are differenced, the difference image is Gaussian
smoothed, and a pair counts as stable when almost no smoothed pixel exceeds an
adaptive threshold.  The threshold tracks the noise level of the video: it is
``k`` times a low quantile of the smoothed difference (per pair, capped by the
median of that statistic over the whole video), never below ``noise_floor``.
Runs of stable pairs are then checked with SSIM on random patches of their
first and last frames, because a nearly uniform background can hide real
changes from plain differencing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import cv2
import numpy as np
from sklearn.base import BaseEstimator

from ._validation import ValidationError, check_frames, check_plane, check_positive, check_same_shape
from .frame_io import Frame, frame_step

C1 = (0.01 * 255) ** 2
C2 = (0.03 * 255) ** 2
# smoothed values are binned at 1/8 luma; thresholds are rounded up to the
# same grid so histogram counts and direct comparisons agree exactly
_BINS_PER_LUMA = 8
_N_BINS = 255 * _BINS_PER_LUMA + 1


@dataclass(frozen=True)
class DiffDecision:
    pair: tuple
    raw_diff: float
    smoothed_diff: float
    threshold_used: float
    exceed_fraction: float
    stable: bool


@dataclass(frozen=True)
class StableChunk:
    t_start: float
    t_end: float
    frame_start: int
    frame_end: int  # inclusive
    verified: bool = True

    @property
    def interval(self):
        return self.t_start, self.t_end

    @property
    def duration(self) -> float:
        return self.t_end - self.t_start

    @property
    def n_frames(self) -> int:
        return self.frame_end - self.frame_start + 1

    def to_record(self) -> dict:
        return {"start_s": self.t_start, "end_s": self.t_end, "verified": self.verified,
                "frame_start": self.frame_start, "frame_end": self.frame_end}

    @classmethod
    def from_record(cls, rec: dict) -> "StableChunk":
        return cls(rec["start_s"], rec["end_s"], rec["frame_start"], rec["frame_end"], rec.get("verified", True))


def frame_diff(a, b) -> np.ndarray:
    """Per-pixel absolute difference of two equally sized frames (uint8)."""
    a = a.pixels if isinstance(a, Frame) else check_plane(a, "a")
    b = b.pixels if isinstance(b, Frame) else check_plane(b, "b")
    check_same_shape(a, b)
    return np.abs(a.astype(np.int16) - b.astype(np.int16)).astype(np.uint8)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalised 1-D Gaussian taps with radius ceil(3 sigma)."""
    check_positive(sigma, "sigma")
    radius = max(1, int(math.ceil(3 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def smooth(image, sigma: float, kernel: Optional[np.ndarray] = None) -> np.ndarray:
    """Separable Gaussian blur with reflective (half-sample symmetric) borders, float32."""
    w = gaussian_kernel(sigma).astype(np.float32) if kernel is None else kernel
    return cv2.sepFilter2D(np.asarray(image, dtype=np.float32), cv2.CV_32F, w, w,
                           borderType=cv2.BORDER_REFLECT)


def smoothed_histogram(s: np.ndarray) -> np.ndarray:
    """Counts of smoothed values on the 1/8-luma grid."""
    bins = np.minimum((s * _BINS_PER_LUMA).astype(np.int32), _N_BINS - 1)
    return np.bincount(bins.ravel(), minlength=_N_BINS)


def _hist_quantile(hist: np.ndarray, q: float) -> float:
    """Lower bin edge of the q-quantile (matches floor-to-grid of the exact order statistic)."""
    total = int(hist.sum())
    k = min(int(q * total), total - 1)
    return int(np.searchsorted(np.cumsum(hist), k, side="right")) / _BINS_PER_LUMA


def _hist_exceed(hist: np.ndarray, threshold: float) -> float:
    m = int(round(threshold * _BINS_PER_LUMA))
    if m >= _N_BINS:
        return 0.0
    return float(hist[m:].sum()) / float(hist.sum())


def _snap(threshold: float) -> float:
    return math.ceil(threshold * _BINS_PER_LUMA) / _BINS_PER_LUMA


def _threshold(baseline: float, k: float, noise_floor: float) -> float:
    return _snap(max(k * baseline, noise_floor))


def adaptive_stability(diff, sigma: float = 3.0, k: float = 3.0, *, change_pixel_fraction: float = 0.002,
                       noise_floor: float = 8.0, baseline: Optional[float] = None,
                       baseline_quantile: float = 0.05, pair=(0, 1)) -> DiffDecision:
    """Decide whether one difference image shows a stable pair.

    Args:
        diff: absolute difference image.
        sigma: Gaussian smoothing scale in pixels.
        k: threshold multiplier over the noise baseline.
        change_pixel_fraction: the pair is stable when strictly fewer than this
            fraction of smoothed pixels reach the threshold.
        noise_floor: lower clamp for the threshold, in luma units.
        baseline: noise baseline to use; estimated from ``diff`` as the
            ``baseline_quantile`` quantile of the smoothed image when omitted.
    """
    check_positive(sigma, "sigma")
    check_positive(k, "k")
    diff = np.asarray(diff)
    s = smooth(diff, sigma)
    hist = smoothed_histogram(s)
    if baseline is None:
        baseline = _hist_quantile(hist, baseline_quantile)
    thr = _threshold(baseline, k, noise_floor)
    frac = _hist_exceed(hist, thr)
    return DiffDecision(tuple(pair), float(diff.mean()), float(s.mean()), thr, frac, frac < change_pixel_fraction)


def ssim(a, b) -> float:
    """Single-window SSIM over two whole patches (8-bit dynamic range)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"patch shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 2 or min(a.shape) < 8:
        raise ValidationError(f"patches must be 2-D with side >= 8, got {a.shape}")
    mu_a = a.mean()
    mu_b = b.mean()
    da = a - mu_a
    db = b - mu_b
    var_a = (da * da).mean()
    var_b = (db * db).mean()
    cov = (da * db).mean()
    num = (2 * mu_a * mu_b + C1) * (2 * cov + C2)
    den = (mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2)
    return float(num / den)


def _mask_array(shape, masks) -> Optional[np.ndarray]:
    if not masks:
        return None
    m = np.zeros(shape, dtype=bool)
    for r in masks:
        x0, y0, x1, y1 = getattr(r, "rect", r)
        m[max(y0, 0):max(y1, 0), max(x0, 0):max(x1, 0)] = True
    return m


def sample_patches(shape, n_patches: int, side: int, rng: np.random.Generator, masks=()) -> list:
    """Top-left corners of ``n_patches`` random patches avoiding mask rectangles."""
    h, w = shape
    if side > h or side > w:
        raise ValidationError(f"patch side {side} exceeds frame {w}x{h}")
    rects = [getattr(r, "rect", r) for r in masks or ()]
    out = []
    attempts = 0
    while len(out) < n_patches:
        y = int(rng.integers(0, h - side + 1))
        x = int(rng.integers(0, w - side + 1))
        attempts += 1
        clash = any(x < x1 and x + side > x0 and y < y1 and y + side > y0 for x0, y0, x1, y1 in rects)
        if clash and attempts < 100 * n_patches:
            continue
        out.append((y, x))
    return out


def _chunk_rng(seed: int, start: int, end: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(start), int(end)])


def verify_chunk(chunk, frames: Sequence[Frame], n_patches: int = 16, patch_side: int = 32,
                 ssim_min: float = 0.9, seed: int = 0, masks=()) -> bool:
    """SSIM check between the first and last frame of a candidate chunk.

    ``chunk`` is a :class:`StableChunk` or an inclusive ``(first, last)``
    frame-index pair.  Every sampled patch must reach ``ssim_min``.
    """
    start, end = (chunk.frame_start, chunk.frame_end) if isinstance(chunk, StableChunk) else chunk
    if end <= start:
        raise ValidationError("a candidate chunk must span at least 2 frames")
    a = frames[start].pixels
    b = frames[end].pixels
    check_same_shape(a, b)
    for y, x in sample_patches(a.shape, n_patches, patch_side, _chunk_rng(seed, start, end), masks):
        if ssim(a[y:y + patch_side, x:x + patch_side], b[y:y + patch_side, x:x + patch_side]) < ssim_min:
            return False
    return True


class StableChunkDetector(BaseEstimator):
    """Find intervals with a static background.

    Parameters
    ----------
    sigma, k, change_pixel_fraction, noise_floor, baseline_quantile
        Per-pair decision, see :func:`adaptive_stability`.
    min_stable_seconds : float
        Shortest chunk kept.
    n_patches, patch_side, ssim_min
        SSIM verification of candidate runs.
    random_state : int
        Seed for patch sampling.
    keep_unverified : bool
        Also report candidates that failed verification (``verified=False``)
        instead of dropping them.

    Attributes
    ----------
    chunks_ : list of StableChunk
    decisions_ : list of DiffDecision, one per consecutive frame pair
    baseline_ : float, video-level noise baseline
    """

    def __init__(self, sigma=3.0, k=3.0, change_pixel_fraction=0.002, noise_floor=8.0,
                 baseline_quantile=0.05, min_stable_seconds=2.0, n_patches=16, patch_side=32,
                 ssim_min=0.9, random_state=0, keep_unverified=False):
        self.sigma = sigma
        self.k = k
        self.change_pixel_fraction = change_pixel_fraction
        self.noise_floor = noise_floor
        self.baseline_quantile = baseline_quantile
        self.min_stable_seconds = min_stable_seconds
        self.n_patches = n_patches
        self.patch_side = patch_side
        self.ssim_min = ssim_min
        self.random_state = random_state
        self.keep_unverified = keep_unverified

    def fit(self, frames, y=None, masks=()):
        check_frames(frames)
        check_positive(self.sigma, "sigma")
        check_positive(self.k, "k")
        self.step_ = frame_step(frames)
        n = len(frames)
        mask = _mask_array(frames[0].pixels.shape, masks)
        w = gaussian_kernel(self.sigma).astype(np.float32)

        raw = np.zeros(max(n - 1, 0))
        means = np.zeros_like(raw)
        base = np.zeros_like(raw)
        hists = np.zeros((max(n - 1, 0), _N_BINS), dtype=np.int32)
        prev = frames[0].pixels.astype(np.int16)
        for i in range(1, n):
            cur = frames[i].pixels.astype(np.int16)
            d = np.abs(cur - prev).astype(np.float32)
            prev = cur
            if mask is not None:
                d[mask] = 0
            raw[i - 1] = d.mean()
            s = smooth(d, self.sigma, w)
            means[i - 1] = s.mean()
            hists[i - 1] = smoothed_histogram(s)
            base[i - 1] = _hist_quantile(hists[i - 1], self.baseline_quantile)

        self.baseline_ = float(np.median(base)) if n > 1 else 0.0
        decisions = []
        stable = np.zeros(max(n - 1, 0), dtype=bool)
        for i in range(n - 1):
            thr = _threshold(min(base[i], self.baseline_), self.k, self.noise_floor)
            frac = _hist_exceed(hists[i], thr)
            stable[i] = frac < self.change_pixel_fraction
            decisions.append(DiffDecision((i, i + 1), float(raw[i]), float(means[i]), thr, frac, bool(stable[i])))
        self.decisions_ = decisions
        self.raw_diffs_ = raw

        chunks = []
        for a, b in _runs(stable, n):
            chunks.extend(self._split_verify(frames, a, b, raw, masks))
        self.chunks_ = chunks
        return self

    def _long_enough(self, a, b):
        # small tolerance absorbs float error in (b - a + 1) * step
        return (b - a + 1) * self.step_ >= self.min_stable_seconds - 1e-9

    def _chunk(self, frames, a, b, verified):
        return StableChunk(frames[a].t, frames[b].t + self.step_, a, b, verified)

    def _split_verify(self, frames, a, b, raw, masks):
        if b <= a or not self._long_enough(a, b):
            return []
        if verify_chunk((a, b), frames, self.n_patches, self.patch_side, self.ssim_min,
                        self.random_state, masks):
            return [self._chunk(frames, a, b, True)]
        # split at the largest pair difference: frames a..m-1 | m..b
        m = a + 1 + int(np.argmax(raw[a:b]))
        left = self._split_verify(frames, a, m - 1, raw, masks)
        right = self._split_verify(frames, m, b, raw, masks)
        if self.keep_unverified and not left and not right:
            return [self._chunk(frames, a, b, False)]
        return left + right

    def predict(self, frames):
        """Per-frame flag: frame lies in a verified stable chunk."""
        out = np.zeros(len(frames), dtype=bool)
        for c in self.chunks_:
            if c.verified:
                out[c.frame_start:c.frame_end + 1] = True
        return out

    def fit_predict(self, frames, y=None, masks=()):
        return self.fit(frames, masks=masks).predict(frames)


def _runs(stable: np.ndarray, n: int):
    """Inclusive frame ranges covered by maximal runs of stable pairs."""
    i = 0
    while i < len(stable):
        if not stable[i]:
            i += 1
            continue
        j = i
        while j + 1 < len(stable) and stable[j + 1]:
            j += 1
        yield i, j + 1
        i = j + 1
    if n == 1:
        yield 0, 0


def detect_stable_chunks(frames, masks=(), **params) -> list:
    """Functional wrapper around :class:`StableChunkDetector`."""
    return StableChunkDetector(**params).fit(frames, masks=masks).chunks_
