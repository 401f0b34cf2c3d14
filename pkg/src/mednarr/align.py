"""Bind representative images, extracted texts and traces into samples."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Optional


from ._validation import ValidationError
from .clients import ClientError
from .frame_io import Frame, video_duration
from .keyframe import PROFILES, change_score, get_profile
from .keywords import ENGLISH_STOP_WORDS, normalize_keyword, rake_keywords
from .trace import median_frame, trace_to_bbox

log = logging.getLogger(__name__)

DEFAULT_PAD_S = 3.0
LOOKBACK_S = 30.0
LOOKAHEAD_S = 5.0


def pad_chunks(chunks, pad_time: float, duration: float) -> list:
    """Expand each ``(start, end)`` by ``pad_time`` on both sides, clamped to the video."""
    if pad_time < 0:
        raise ValidationError(f"pad_time must be >= 0, got {pad_time}")
    out = []
    for c in chunks:
        a, b = c.interval if hasattr(c, "interval") else c
        out.append((max(0.0, a - pad_time), min(float(duration), b + pad_time)))
    return out


def _overlaps(a, b) -> bool:
    return a[0] < b[1] and b[0] < a[1]


def assign_segments(intervals, segments) -> dict:
    """Chunk index -> ``[(segment_index, segment)]`` for segments overlapping it."""
    out = {}
    for ci, iv in enumerate(intervals):
        hits = [(si, s) for si, s in enumerate(segments)
                if _overlaps(iv, (s.start, s.end)) or iv[0] <= s.start == s.end <= iv[1]]
        if hits:
            out[ci] = hits
    return out


@dataclass
class RepresentativeImage:
    image_id: str
    chunk_index: int
    t: float
    frame: Frame
    method: str  # "median_of_stable" | "deduped_keyframe"
    frame_index: int = 0

    def __post_init__(self):
        if self.method not in ("median_of_stable", "deduped_keyframe"):
            raise ValueError(f"unknown image method {self.method!r}")


def representative_images(scene_chunks, stable_chunks, frames, video_id: str = "video",
                          dedup_threshold: float = 0.02) -> list:
    """Images standing for each scene chunk.

    A scene chunk overlapping stable chunks gets one median image per stable
    chunk (over the frames in the overlap).  Otherwise its key-frames are
    de-duplicated: a key-frame is dropped when its change score against the
    last kept one is below ``dedup_threshold``.
    """
    images = []
    for ci, sc in enumerate(scene_chunks):
        made = 0
        for st in stable_chunks:
            a, b = max(sc.t_start, st.t_start), min(sc.t_end, st.t_end)
            if a >= b:
                continue
            idx = [i for i in range(st.frame_start, st.frame_end + 1) if a <= frames[i].t < b]
            if not idx:
                continue
            med = median_frame([frames[i] for i in idx], color=True)
            t = 0.5 * (a + b)
            img = Frame(t, med.pixels, med.color)
            images.append(RepresentativeImage(f"{video_id}-c{ci:03d}-s{made:02d}", ci, t, img,
                                              "median_of_stable", idx[len(idx) // 2]))
            made += 1
        if made:
            continue
        kept = []
        for kf in sorted(sc.keyframes, key=lambda k: k.frame_index):
            f = frames[kf.frame_index]
            if kept and change_score(kept[-1][1].pixels, f.pixels) < dedup_threshold:
                continue
            kept.append((kf, f))
        for j, (kf, f) in enumerate(kept):
            images.append(RepresentativeImage(f"{video_id}-c{ci:03d}-k{j:02d}", ci, kf.t, f,
                                              "deduped_keyframe", kf.frame_index))
    return images


@dataclass(frozen=True)
class TimedKeyword:
    keyword: str
    t: float


def raw_keyword_timeline(segments, stoplist=ENGLISH_STOP_WORDS) -> list:
    """RAKE keywords of each raw ASR segment, stamped with the time their first word is spoken.

    Without word timings the segment start time is used.
    """
    timeline = []
    for seg in segments:
        words = seg.words
        for kw in rake_keywords(seg.text, stoplist):
            if words and len(words) == len(seg.text.split()):
                t = words[kw.start].start
            else:
                t = seg.start
            timeline.append(TimedKeyword(kw.phrase, float(t)))
    return sorted(timeline, key=lambda k: (k.t, k.keyword))


def text_keywords(text: str, stoplist=ENGLISH_STOP_WORDS) -> frozenset:
    return frozenset(normalize_keyword(k.phrase) for k in rake_keywords(text, stoplist))


def map_image_to_text(image_t: float, texts, timeline, lookback: float = LOOKBACK_S,
                      lookahead: float = LOOKAHEAD_S, stoplist=ENGLISH_STOP_WORDS) -> list:
    """Indices of the texts linked to an image shown at ``image_t``.

    A text is linked when some raw keyword spoken within
    ``[image_t - lookback, image_t + lookahead]`` is among the text's keywords.
    ``texts`` may hold strings or objects with a ``text`` attribute.
    """
    near = {normalize_keyword(k.keyword) for k in timeline if image_t - lookback <= k.t <= image_t + lookahead}
    if not near:
        return []
    links = []
    for i, item in enumerate(texts):
        body = item if isinstance(item, str) else item.text
        if near & text_keywords(body, stoplist):
            links.append(i)
    return links


def _parse_labels(response: str) -> list:
    response = response.strip()
    if not response:
        return []
    try:
        data = json.loads(response)
    except json.JSONDecodeError:
        return [p.strip() for p in response.replace("\n", ",").split(",") if p.strip()]
    if isinstance(data, dict):
        data = data.get("labels", [])
    if isinstance(data, str):
        data = [data]
    if not isinstance(data, list):
        return []
    return [str(x).strip() for x in data if str(x).strip()]


@dataclass(frozen=True)
class SubdomainResult:
    labels: tuple
    failed: bool = False


def classify_subdomains(segments, lm, vocabulary) -> SubdomainResult:
    """LM subdomain labels restricted to ``vocabulary`` (case-insensitive, vocabulary spelling kept)."""
    text = " ".join(s.text for s in segments).strip()
    if not text:
        return SubdomainResult(())
    try:
        response = lm.complete("subdomain", text, {"vocabulary": list(vocabulary)})
    except ClientError as exc:
        log.warning("subdomain classification failed: %s", exc)
        return SubdomainResult((), True)
    canon = {v.lower(): v for v in vocabulary}
    labels = []
    for lab in _parse_labels(response):
        v = canon.get(lab.lower())
        if v is not None and v not in labels:
            labels.append(v)
    return SubdomainResult(tuple(labels))


def _known_domain(label: str) -> Optional[str]:
    try:
        return get_profile(label).name
    except KeyError:
        return None


def detect_cross_domain(segments, lm, classifier, images) -> dict:
    """Image id -> domains (among those the LM proposes) whose classifier accepts it.

    Unknown modality names are ignored; a failing LM leaves every image untagged.
    """
    text = " ".join(s.text for s in segments).strip()
    try:
        proposed = _parse_labels(lm.complete("crossdomain", text, {"domains": sorted(PROFILES)})) if text else []
    except ClientError as exc:
        log.warning("cross-domain detection failed: %s", exc)
        proposed = []
    domains = []
    for lab in proposed:
        d = _known_domain(lab)
        if d is not None and d not in domains:
            domains.append(d)
    out = {}
    for img in images:
        tags = []
        for d in domains:
            try:
                if classifier.classify(img.frame, d, frame_index=img.frame_index).label:
                    tags.append(d)
            except ClientError as exc:
                log.warning("cross-domain classification of %s as %s failed: %s", img.image_id, d, exc)
        out[img.image_id] = tags
    return out


@dataclass
class AlignedSample:
    sample_id: str
    video_id: str
    image: RepresentativeImage
    medical_texts: list
    roi_texts: list
    traces: list
    bboxes: list
    chunk_interval: tuple
    domain: str
    subdomains: list = field(default_factory=list)
    cross_domains: list = field(default_factory=list)

    def __post_init__(self):
        lo, hi = self.chunk_interval
        for tr in self.traces:
            if not _overlaps(tuple(tr.chunk_interval), (lo, hi)):
                raise ValidationError(f"trace {tr.chunk_interval} outside sample chunk {self.chunk_interval}")
            w, h = self.image.frame.width, self.image.frame.height
            if any(not (0 <= p.x < w and 0 <= p.y < h) for p in tr.points):
                raise ValidationError("trace point outside the image")


def align_video(video_id: str, domain: str, frames, scene_chunks, stable_chunks, traces, raw_segments,
                texts, pad_time: float = DEFAULT_PAD_S, lookback: float = LOOKBACK_S,
                lookahead: float = LOOKAHEAD_S, subdomains=(), cross_domains: Optional[dict] = None,
                images: Optional[list] = None, duration: Optional[float] = None,
                stoplist=ENGLISH_STOP_WORDS) -> list:
    """One sample per representative image that links to at least one text.

    ``texts`` are ExtractedText items whose ``chunk_id`` is the scene chunk
    index; an image only considers its own chunk's texts.  Traces are attached
    when their stable chunk overlaps the padded scene chunk.
    """
    if duration is None:
        duration = video_duration(frames)
    padded = pad_chunks(scene_chunks, pad_time, duration)
    if images is None:
        images = representative_images(scene_chunks, stable_chunks, frames, video_id)
    timeline = raw_keyword_timeline(raw_segments, stoplist)
    by_chunk = {}
    for tx in texts:
        by_chunk.setdefault(tx.chunk_id, []).append(tx)
    samples = []
    for img in images:
        candidates = by_chunk.get(img.chunk_index, [])
        linked = [candidates[i] for i in map_image_to_text(img.t, candidates, timeline, lookback, lookahead,
                                                           stoplist)]
        if not linked:
            continue
        interval = padded[img.chunk_index]
        attached = [tr for tr in traces if _overlaps(tuple(tr.chunk_interval), interval)]
        samples.append(AlignedSample(
            sample_id=img.image_id, video_id=video_id, image=img,
            medical_texts=[t.text for t in linked if t.kind == "medical"],
            roi_texts=[t.text for t in linked if t.kind == "roi"],
            traces=attached, bboxes=[trace_to_bbox(tr) for tr in attached],
            chunk_interval=interval, domain=domain, subdomains=list(subdomains),
            cross_domains=list((cross_domains or {}).get(img.image_id, [])),
        ))
    return samples
