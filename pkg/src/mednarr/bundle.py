"""Per-video input bundles: a directory holding the raw video and its sidecars.

Layout (every file but the video is optional)::

    video.nmv          raw frames
    meta.json          {video_id, duration, has_speech, channel_subscribers, domain}
    transcript.jsonl   raw ASR segments
    speech.json        {"speech": [[start, end], ...]}   speech-segmenter mock
    faces.json         {"masks": [[x0, y0, x1, y1], ...]}  face-detector mock
    classifier.json    scripted key-frame classifier
    lm.json            scripted language model
    lexicon.txt        medical lexicon
    ground_truth.json  synthetic oracle (synth only)
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .frame_io import RawVideo, write_stream
from .gating import VideoMeta
from .synthetic import generate_synthetic, random_spec
from .transcript import TranscriptSegment, Word, dump_transcript, load_transcript

FILES = {
    "video": "video.nmv",
    "meta": "meta.json",
    "transcript": "transcript.jsonl",
    "speech": "speech.json",
    "faces": "faces.json",
    "classifier": "classifier.json",
    "lm": "lm.json",
    "lexicon": "lexicon.txt",
    "ground_truth": "ground_truth.json",
}


@dataclass
class VideoBundle:
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)
        if not self.path("video").is_file():
            raise FileNotFoundError(f"{self.root} has no {FILES['video']}")

    def path(self, name: str) -> Path:
        return self.root / FILES[name]

    def optional(self, name: str) -> Optional[Path]:
        p = self.path(name)
        return p if p.is_file() else None

    @property
    def video_id(self) -> str:
        meta = self.meta_dict()
        return str(meta.get("video_id") or self.root.name)

    def meta_dict(self) -> dict:
        p = self.optional("meta")
        return json.loads(p.read_text()) if p else {}

    def video(self) -> RawVideo:
        return RawVideo(self.path("video"))

    def transcript(self) -> Optional[list]:
        p = self.optional("transcript")
        return load_transcript(p) if p else None


# -- synthetic bundles ----------------------------------------------------------

# raw narration, what a language model would extract from it, and the lexicon
_TERMS = (
    ("pleural effusion", "There is a pleural effusion at the right lung base."),
    ("pulmonary nodule", "There is a pulmonary nodule in the left upper lobe."),
    ("rib fracture", "There is a rib fracture along the lateral chest wall."),
    ("hepatic lesion", "There is a hepatic lesion in segment seven."),
    ("renal cyst", "There is a renal cyst at the lower pole."),
    ("aortic aneurysm", "There is an aortic aneurysm below the renal arteries."),
)
_FILLER = ("so", "now", "look", "here", "at", "the", "we", "can", "see", "this", "area", "is", "a", "and",
           "subscribe", "to", "my", "channel", "please", "thanks", "for", "watching", "hemorrhage", "small",
           "near", "region")
_MISSPELL = ("hemorage", "hemorrhage")


def _words(text: str, start: float, end: float) -> tuple:
    toks = text.split()
    step = (end - start) / len(toks)
    return tuple(Word(tok, round(start + i * step, 3), round(start + (i + 1) * step, 3))
                 for i, tok in enumerate(toks))


def synthetic_narration(static_segments, duration: float, seed: int = 0):
    """Transcript narrating each static stretch, plus matching LM script and lexicon.

    Each stretch of at least 3 s is narrated throughout by a deictic sentence
    naming one term.  The first one also carries a planted misspelling the
    scripted LM can fix, and a closing non-medical plea is added at the end.
    """
    rng = np.random.default_rng([seed, 0x7E47])
    segments, rules = [], []
    order = rng.permutation(len(_TERMS))
    k = 0
    for a, b in static_segments:
        if b - a < 3.0:
            continue
        term, caption = _TERMS[order[k % len(_TERMS)]]
        k += 1
        extra = f" with some {_MISSPELL[0]} near it" if k == 1 else ""
        text = f"now look here at the {term}{extra}"
        s0, s1 = round(a + 0.5, 3), round(b - 0.5, 3)
        segments.append(TranscriptSegment(s0, s1, text, _words(text, s0, s1)))
        rules.append({"contains": term, "response": {"medical": [caption], "roi": [term]}})
    if duration - 3.0 > (segments[-1].end if segments else 0.0):
        text = "please subscribe to my channel"
        s0, s1 = round(duration - 2.5, 3), round(duration - 0.5, 3)
        segments.append(TranscriptSegment(s0, s1, text, _words(text, s0, s1)))
    lm = {
        "correct": {"substitutions": {_MISSPELL[0]: _MISSPELL[1]}},
        "extract": {"rules": rules, "default": {"medical": [], "roi": []}},
        "subdomain": {"default": ["chest"]},
        "crossdomain": {"default": []},
    }
    lexicon = [f"{t}\t5" for t, _ in _TERMS] + list(_FILLER)
    return segments, lm, lexicon


def write_synthetic_bundle(out_dir, seed: int = 0, noise_sigma: float = 3.0, duration: float = 60.0,
                           domain: str = "General medical illustrations", spec=None,
                           channel_subscribers: int = 1000) -> VideoBundle:
    """Render a synthetic video with every sidecar needed for a mock run."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if spec is None:
        spec = random_spec(seed, noise_sigma, duration=duration)
    video, gt = generate_synthetic(spec, seed)
    with open(out / FILES["video"], "wb") as fh:
        write_stream(video, fh)
    (out / FILES["ground_truth"]).write_text(gt.to_json())
    segments, lm, lexicon = synthetic_narration(gt.static_segments, video.duration, seed)
    (out / FILES["transcript"]).write_text(dump_transcript(segments))
    meta = VideoMeta(video.duration, bool(segments), channel_subscribers, domain, f"synth{seed:04d}")
    (out / FILES["meta"]).write_text(json.dumps({
        "video_id": meta.video_id, "duration": meta.duration, "has_speech": meta.has_speech,
        "channel_subscribers": meta.channel_subscribers, "domain": meta.domain}, indent=2, sort_keys=True) + "\n")
    (out / FILES["speech"]).write_text(json.dumps({"speech": [[s.start, s.end] for s in segments]}) + "\n")
    (out / FILES["faces"]).write_text(json.dumps({"masks": [list(m) for m in gt.masks]}) + "\n")
    (out / FILES["classifier"]).write_text(json.dumps({"default": True}) + "\n")
    (out / FILES["lm"]).write_text(json.dumps(lm, indent=2, sort_keys=True) + "\n")
    (out / FILES["lexicon"]).write_text("\n".join(lexicon) + "\n")
    return VideoBundle(out)
