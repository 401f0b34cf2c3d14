"""Video-level inclusion rules and narrative-style filtering."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .clients import ClientError

log = logging.getLogger(__name__)

MIN_DURATION_S = 60.0
MAX_DURATION_S = 2 * 3600.0
MAX_SUBSCRIBERS = 1_000_000
STREAK_SIMILARITY = 0.9
STREAK_LENGTH = 3
# cosine similarities within this of the threshold count as reaching it
_SIM_EPS = 1e-12

RULES = ("duration_min", "duration_max", "speech", "subscribers", "medical_fraction", "narrative")


class NarrativeUndetermined(RuntimeError):
    """Narrative status cannot be decided (no candidates, no speech source)."""


@dataclass(frozen=True)
class VideoMeta:
    duration: float
    has_speech: bool
    channel_subscribers: int
    domain: str
    video_id: str = ""

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError(f"duration must be > 0, got {self.duration}")
        if self.channel_subscribers < 0:
            raise ValueError("subscriber count cannot be negative")


@dataclass(frozen=True)
class GateReport:
    passed: bool
    failed_rules: tuple
    medical_fraction: Optional[float] = None
    narrative: Optional[bool] = None
    streak_count: Optional[int] = None

    def to_dict(self):
        return {"passed": self.passed, "failed_rules": list(self.failed_rules),
                "medical_fraction": self.medical_fraction, "narrative": self.narrative,
                "streak_count": self.streak_count}


def gate_video(meta: VideoMeta, medical_fraction: Optional[float], profile, narrative: Optional[bool] = None,
               streak_count: Optional[int] = None) -> GateReport:
    """Apply every inclusion rule and report all that fail.

    Rules whose input is None (``medical_fraction``, ``narrative``) are not
    evaluated, so the metadata rules can run before any frame is decoded.
    """
    failed = []
    if meta.duration < MIN_DURATION_S:
        failed.append("duration_min")
    if meta.duration > MAX_DURATION_S:
        failed.append("duration_max")
    if not meta.has_speech:
        failed.append("speech")
    if meta.channel_subscribers > MAX_SUBSCRIBERS:
        failed.append("subscribers")
    if medical_fraction is not None and medical_fraction < profile.medical_percent_threshold:
        failed.append("medical_fraction")
    if narrative is False:
        failed.append("narrative")
    return GateReport(not failed, tuple(failed), medical_fraction, narrative, streak_count)


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 0.0
    return float(np.dot(u, v) / (nu * nv))


def is_streak(similarities, threshold: float = STREAK_SIMILARITY) -> bool:
    sims = list(similarities)
    return len(sims) == STREAK_LENGTH and all(s >= threshold - _SIM_EPS for s in sims)


@dataclass
class StreakResult:
    streaks: int = 0
    candidates: int = 0
    unevaluated: int = 0
    similarities: list = field(default_factory=list)


def narrative_streaks(keyframes, frames, embed, max_candidates: int = 16, seed: int = 0,
                      threshold: float = STREAK_SIMILARITY) -> StreakResult:
    """Count medical key-frames whose next three key-frames all look alike.

    At most ``max_candidates`` medical key-frames (with three successors) are
    drawn with a seeded RNG.  Embedding failures skip the candidate and are
    counted in ``unevaluated``.
    """
    ordered = sorted(keyframes, key=lambda k: k.frame_index)
    eligible = [i for i, k in enumerate(ordered) if k.medical and i + STREAK_LENGTH < len(ordered)]
    if len(eligible) > max_candidates:
        rng = np.random.default_rng(seed)
        eligible = sorted(rng.choice(eligible, size=max_candidates, replace=False).tolist())
    result = StreakResult()
    cache = {}

    def vec(k):
        if k.frame_index not in cache:
            cache[k.frame_index] = embed.embed(frames[k.frame_index])
        return cache[k.frame_index]

    for i in eligible:
        try:
            base = vec(ordered[i])
            sims = [cosine_similarity(base, vec(ordered[i + j])) for j in range(1, STREAK_LENGTH + 1)]
        except ClientError as exc:
            log.warning("embedding failed for key-frame %d: %s", ordered[i].frame_index, exc)
            result.unevaluated += 1
            continue
        result.candidates += 1
        result.similarities.append(sims)
        if is_streak(sims, threshold):
            result.streaks += 1
    return result


def is_narrative(streak_count: int, candidates: int, profile) -> bool:
    """True when the streak share reaches the profile percentage (inclusive)."""
    if candidates <= 0:
        raise NarrativeUndetermined("no streak candidates were evaluated")
    return streak_count * 100 >= profile.narrative_streak_percent * candidates


def merge_intervals(intervals) -> list:
    out = []
    for a, b in sorted((float(a), float(b)) for a, b in intervals):
        if b < a:
            continue
        if out and a <= out[-1][1]:
            out[-1] = (out[-1][0], max(out[-1][1], b))
        else:
            out.append((a, b))
    return out


def speech_intervals(segments) -> list:
    return merge_intervals((s.start, s.end) for s in segments if s.text.strip())


def contiguous_speech(intervals, lo: float, hi: float) -> float:
    """Longest single run of merged speech inside [lo, hi]."""
    best = 0.0
    for a, b in intervals:
        best = max(best, min(b, hi) - max(a, lo))
    return best


def is_narrative_nonstatic(keyframes, transcript, profile, segmenter=None,
                           window: tuple = (5.0, 15.0)) -> bool:
    """More than half of the medical key-frames have enough speech around them.

    Speech comes from the transcript segments; when there is no transcript the
    speech segmenter is asked instead.  With neither, the status is undetermined.
    """
    if transcript is not None:
        intervals = speech_intervals(transcript)
    elif segmenter is not None:
        try:
            intervals = merge_intervals(segmenter.speech_intervals())
        except ClientError as exc:
            raise NarrativeUndetermined(f"speech segmenter failed: {exc}") from exc
    else:
        raise NarrativeUndetermined("no transcript and no speech segmenter")
    medical = [k for k in keyframes if k.medical]
    if not medical:
        return False
    before, after = window
    hits = sum(1 for k in medical
               if contiguous_speech(intervals, k.t - before, k.t + after) >= profile.min_speech_seconds)
    return 2 * hits > len(medical)
