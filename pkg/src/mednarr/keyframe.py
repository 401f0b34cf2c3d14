"""Key-frame detection, key-frame classification and scene chunks."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import ValidationError, check_frames
from .clients import ClientError

log = logging.getLogger(__name__)


class EmptyInputError(ValidationError):
    pass


@dataclass(frozen=True)
class DomainProfile:
    """Per-domain thresholds.

    ``scene_change_threshold`` of None selects the adaptive two-pass threshold
    (mean + k standard deviations of consecutive-frame change scores).
    Percentages are on a 0-100 scale.
    """

    name: str
    medical_percent_threshold: float
    static: bool
    scene_change_threshold: Optional[float] = None
    narrative_streak_percent: float = 30.0
    min_speech_seconds: float = 3.0


def _profile(name, pct, static):
    return DomainProfile(name, pct, static, 0.08 if static else None)


# medical key-frame percentage per domain; Histopathology has no published
# value and reuses the general-illustration threshold
PROFILES = {p.name: p for p in (
    _profile("CT", 10, True),
    _profile("X-ray", 10, True),
    _profile("MRI", 5, True),
    _profile("Dermatology", 30, False),
    _profile("Dentistry", 30, False),
    _profile("Endoscopy", 50, False),
    _profile("Surgery", 50, False),
    _profile("Ultrasound", 40, False),
    _profile("Ophthalmology", 35, False),
    _profile("Mammography", 25, False),
    _profile("General medical illustrations", 20, False),
    _profile("Histopathology", 20, False),
)}

_ALIASES = {
    "xray": "X-ray", "x ray": "X-ray", "x-rays": "X-ray", "us": "Ultrasound", "mammo": "Mammography",
    "derma": "Dermatology", "endo": "Endoscopy", "surg": "Surgery", "optha": "Ophthalmology",
    "histo": "Histopathology", "genmed": "General medical illustrations",
    "general": "General medical illustrations",
}


def get_profile(name: str, **overrides) -> DomainProfile:
    key = name.strip()
    lookup = {k.lower(): k for k in PROFILES}
    canonical = lookup.get(key.lower()) or _ALIASES.get(key.lower())
    if canonical is None:
        raise KeyError(f"unknown domain {name!r}; known: {sorted(PROFILES)}")
    profile = PROFILES[canonical]
    return replace(profile, **overrides) if overrides else profile


@dataclass(frozen=True)
class KeyFrame:
    frame_index: int
    t: float
    change_score: float
    medical: Optional[bool] = None
    confidence: Optional[float] = None
    error: Optional[str] = None

    def to_record(self) -> dict:
        return {"frame_index": self.frame_index, "t": self.t, "change_score": self.change_score,
                "medical": self.medical, "confidence": self.confidence, "error": self.error}

    @classmethod
    def from_record(cls, rec):
        return cls(**rec)


@dataclass(frozen=True)
class SceneChunk:
    t_start: float
    t_end: float
    keyframes: tuple = field(default=(), compare=False)
    medical: bool = True

    def __post_init__(self):
        if not self.t_start < self.t_end:
            raise ValidationError(f"scene chunk needs t_start < t_end, got ({self.t_start}, {self.t_end})")

    @property
    def interval(self):
        return self.t_start, self.t_end


def change_score(a: np.ndarray, b: np.ndarray) -> float:
    """Mean absolute luma difference, normalised to [0, 1]."""
    return float(np.abs(a.astype(np.int16) - b.astype(np.int16)).mean()) / 255.0


class KeyframeDetector(BaseEstimator):
    """Flag frames that differ enough from the previous key-frame.

    Parameters
    ----------
    threshold : float or None
        Fixed change-score threshold in [0, 1].  None learns one in ``fit``
        as ``mean + adaptive_k * std`` of consecutive-frame scores.
    adaptive_k : float
    min_threshold : float
        Floor for the learned threshold, so a perfectly still video does not
        turn every frame into a key-frame.

    Attributes
    ----------
    threshold_ : float
    keyframes_ : list of KeyFrame
    """

    def __init__(self, threshold=None, adaptive_k=2.0, min_threshold=0.02):
        self.threshold = threshold
        self.adaptive_k = adaptive_k
        self.min_threshold = min_threshold

    def _learn_threshold(self, frames):
        if self.threshold is not None:
            return float(self.threshold)
        scores = [change_score(frames[i - 1].pixels, frames[i].pixels) for i in range(1, len(frames))]
        if not scores:
            return float(self.min_threshold)
        scores = np.asarray(scores)
        return max(float(scores.mean() + self.adaptive_k * scores.std()), float(self.min_threshold))

    def fit(self, frames, y=None):
        if len(frames) == 0:
            raise EmptyInputError("cannot detect key-frames in an empty stream")
        check_frames(frames)
        self.threshold_ = self._learn_threshold(frames)
        self.keyframes_ = self._scan(frames)
        return self

    def _scan(self, frames):
        first = frames[0]
        keyframes = [KeyFrame(0, first.t, 0.0)]
        ref = first.pixels
        for i in range(1, len(frames)):
            cur = frames[i].pixels
            score = change_score(ref, cur)
            if score >= self.threshold_:
                keyframes.append(KeyFrame(i, frames[i].t, score))
                ref = cur
        return keyframes

    def predict(self, frames):
        """Boolean key-frame flag per frame, using the fitted threshold."""
        if len(frames) == 0:
            raise EmptyInputError("cannot detect key-frames in an empty stream")
        out = np.zeros(len(frames), dtype=bool)
        out[[k.frame_index for k in self._scan(frames)]] = True
        return out


def detect_keyframes(frames, profile: DomainProfile, **params) -> list:
    detector = KeyframeDetector(threshold=profile.scene_change_threshold, **params)
    return detector.fit(frames).keyframes_


def classify_keyframes(keyframes, frames, classifier, domain: str, retries: int = 2) -> list:
    """Annotate key-frames with the classifier's medical label.

    Failures after ``retries`` extra attempts leave the frame unclassified
    (``medical=None``) with the error recorded; they are never fatal.
    """
    out = []
    for kf in keyframes:
        err = None
        for _ in range(retries + 1):
            try:
                res = classifier.classify(frames[kf.frame_index], domain, frame_index=kf.frame_index)
                out.append(replace(kf, medical=bool(res.label), confidence=float(res.confidence), error=None))
                break
            except ClientError as exc:
                err = str(exc)
        else:
            log.warning("key-frame %d left unclassified: %s", kf.frame_index, err)
            out.append(replace(kf, medical=None, confidence=None, error=err))
    return out


def medical_fraction(keyframes) -> float:
    """Percentage of key-frames labelled medical; unclassified frames count as not medical."""
    if not keyframes:
        return 0.0
    return 100.0 * sum(1 for k in keyframes if k.medical) / len(keyframes)


def unclassified_count(keyframes) -> int:
    return sum(1 for k in keyframes if k.medical is None)


def build_scene_chunks(keyframes, video_duration: float) -> list:
    """Scene chunks opened by medical key-frames.

    Each medical key-frame starts a chunk that ends at the next key-frame of
    any kind, or at the end of the video.
    """
    ordered = sorted(keyframes, key=lambda k: (k.t, k.frame_index))
    chunks = []
    for i, kf in enumerate(ordered):
        if not kf.medical:
            continue
        end = ordered[i + 1].t if i + 1 < len(ordered) else video_duration
        end = min(end, video_duration)
        if end > kf.t:
            chunks.append(SceneChunk(kf.t, end, (kf,), True))
    return chunks
