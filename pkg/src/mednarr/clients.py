"""Boundaries to external ML services, with deterministic local stand-ins.

Every service the pipeline depends on (key-frame classifier, language model,
frame embedder, speech segmenter, face detector) is reached through a small
duck-typed client.  The HTTP clients speak plain JSON; the mocks read scripts
or sidecar files so that whole runs are reproducible offline.
"""

from __future__ import annotations

import base64
import io
import json
import logging
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping, Optional, Protocol

import cv2
import numpy as np
from PIL import Image

from .frame_io import Frame

log = logging.getLogger(__name__)

LM_TASKS = ("correct", "extract", "subdomain", "crossdomain")
_PUNCT = ".,;:!?\"'()[]"


class ClientError(RuntimeError):
    """Transport or protocol failure talking to an external service."""


@dataclass(frozen=True)
class Classification:
    label: bool
    confidence: float = 1.0


class ClassifierClient(Protocol):
    def classify(self, frame: Frame, domain: str, frame_index: Optional[int] = None) -> Classification: ...


class LMClient(Protocol):
    def complete(self, task: str, text: str, context: Optional[dict] = None) -> str: ...


class EmbeddingClient(Protocol):
    def embed(self, frame: Frame) -> np.ndarray: ...


class SpeechSegmenter(Protocol):
    def speech_intervals(self, pcm: Optional[np.ndarray] = None, seconds: float = 60.0) -> list: ...


class FaceDetector(Protocol):
    def detect(self, frame: Frame) -> list: ...


def encode_png(frame_or_array, compress_level: int = 6) -> bytes:
    """PNG bytes for a frame (colour plane if present, else luma)."""
    if isinstance(frame_or_array, Frame):
        arr = frame_or_array.color if frame_or_array.color is not None else frame_or_array.pixels
    else:
        arr = np.asarray(frame_or_array, dtype=np.uint8)
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(arr)).save(buf, format="PNG", compress_level=compress_level)
    return buf.getvalue()


def decode_png(data: bytes) -> np.ndarray:
    return np.asarray(Image.open(io.BytesIO(data)))


def _load_json(path_or_obj):
    if isinstance(path_or_obj, (str, Path)):
        return json.loads(Path(path_or_obj).read_text())
    return path_or_obj


# -- key-frame classifier -----------------------------------------------------

class ConstantClassifier:
    def __init__(self, label: bool = True, confidence: float = 1.0):
        self.label = label
        self.confidence = confidence

    def classify(self, frame, domain, frame_index=None):
        return Classification(self.label, self.confidence)


class ScriptedClassifier:
    """Labels read from a script mapping frame index to label.

    Flat form: ``{"<index>": true | false | {"label": .., "confidence": ..},
    "default": false, "fail": [<index>, ...]}``.  Per-domain form:
    ``{"domains": {"CT": <flat table>, ...}}``; unknown domains reject.
    Indices under ``"fail"`` raise :class:`ClientError`.
    """

    def __init__(self, script):
        self.script = _load_json(script)

    @classmethod
    def from_file(cls, path):
        return cls(path)

    def classify(self, frame, domain, frame_index=None):
        table = self.script
        if "domains" in table:
            table = table["domains"].get(domain)
            if table is None:
                return Classification(False, 1.0)
        if frame_index is not None and frame_index in set(table.get("fail", ())):
            raise ClientError(f"scripted failure for frame {frame_index}")
        entry = table.get(str(frame_index), table.get("default", False))
        if isinstance(entry, dict):
            return Classification(bool(entry["label"]), float(entry.get("confidence", 1.0)))
        return Classification(bool(entry), 1.0)


# -- language model -----------------------------------------------------------

def load_prompt(task: str) -> str:
    if task not in LM_TASKS:
        raise ValueError(f"unknown LM task {task!r}")
    return resources.files("mednarr").joinpath("prompts", f"{task}.txt").read_text()


def render_prompt(task: str, text: str, context: Optional[dict] = None) -> str:
    ctx = json.dumps(context or {}, sort_keys=True)
    return load_prompt(task).replace("{context}", ctx).replace("{text}", text)


class EchoLM:
    """Returns the input unchanged for every task."""

    def complete(self, task, text, context=None):
        return text


class ScriptedLM:
    """Rule-driven stand-in for a temperature-zero language model.

    Script layout (all keys optional)::

        {
          "correct": {"substitutions": {"hemorage": "hemorrhage"}},
          "extract": {"rules": [{"contains": "fracture", "response": {...}}],
                      "default": {"medical": [], "roi": []}},
          "subdomain": {"rules": [...], "default": ["..."]},
          "crossdomain": {"rules": [...], "default": ["CT"]},
          "fail": ["extract"]
        }

    Rule responses that are not strings are JSON-encoded.  Tasks listed in
    ``fail`` raise :class:`ClientError`.
    """

    def __init__(self, script=None):
        self.script = _load_json(script) or {}

    @classmethod
    def from_file(cls, path):
        return cls(path)

    def complete(self, task, text, context=None):
        if task in self.script.get("fail", ()):
            raise ClientError(f"scripted failure for task {task}")
        spec = self.script.get(task, {})
        if task == "correct":
            subs = {k.lower(): v for k, v in spec.get("substitutions", {}).items()}
            out = []
            for tok in text.split(" "):
                core = tok.strip(_PUNCT)
                if core and core.lower() in subs:
                    tok = tok.replace(core, subs[core.lower()], 1)
                out.append(tok)
            return " ".join(out)
        for rule in spec.get("rules", ()):
            if rule["contains"].lower() in text.lower():
                return _as_text(rule["response"])
        if "default" in spec:
            return _as_text(spec["default"])
        return text if task == "correct" else ""


def _as_text(value) -> str:
    return value if isinstance(value, str) else json.dumps(value, sort_keys=True)


# -- embeddings ---------------------------------------------------------------

class LumaEmbedding:
    """Flattened luma thumbnail (``size`` x ``size``, area-averaged)."""

    def __init__(self, size: int = 32):
        self.size = size

    def embed(self, frame):
        small = cv2.resize(frame.pixels, (self.size, self.size), interpolation=cv2.INTER_AREA)
        return small.astype(np.float64).ravel()


class ScriptedEmbedding:
    """Embeddings looked up by frame time (rounded to milliseconds)."""

    def __init__(self, vectors: Mapping):
        self.vectors = {round(float(k), 3): np.asarray(v, dtype=np.float64) for k, v in vectors.items()}

    def embed(self, frame):
        key = round(frame.t, 3)
        if key not in self.vectors:
            raise ClientError(f"no scripted embedding for t={frame.t}")
        return self.vectors[key]


# -- speech segmenter ---------------------------------------------------------

class SidecarSpeechSegmenter:
    """Speech intervals read from ``{"speech": [[start, end], ...]}``."""

    def __init__(self, source):
        data = _load_json(source)
        if isinstance(data, dict):
            data = data.get("speech", [])
        self.intervals = [(float(a), float(b)) for a, b in data]

    def speech_intervals(self, pcm=None, seconds=60.0):
        return list(self.intervals)


# -- face detector ------------------------------------------------------------

class SidecarFaceDetector:
    """Face rectangles read from ``{"masks": [[x0, y0, x1, y1], ...]}``; the same
    rectangles apply to every frame."""

    def __init__(self, source):
        from .trace import MaskRegion

        data = _load_json(source)
        if isinstance(data, dict):
            data = data.get("masks", [])
        self.regions = [MaskRegion(tuple(r), "face_detector") for r in data]

    def detect(self, frame):
        return [r.clipped(frame.width, frame.height) for r in self.regions]


class NoFaces:
    def detect(self, frame):
        return []


# -- HTTP clients -------------------------------------------------------------

class _JsonHttp:
    def __init__(self, url: str, timeout: float = 30.0, retries: int = 2, backoff: float = 0.5):
        self.url = url
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff

    def post(self, payload: dict) -> dict:
        body = json.dumps(payload).encode()
        last = None
        for attempt in range(self.retries + 1):
            req = urllib.request.Request(self.url, body, {"Content-Type": "application/json"})
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    return json.loads(resp.read())
            except (urllib.error.URLError, OSError, ValueError) as exc:
                last = exc
                log.warning("request to %s failed (attempt %d): %s", self.url, attempt + 1, exc)
                time.sleep(self.backoff * (2 ** attempt))
        raise ClientError(f"{self.url}: {last}")


class HttpClassifier(_JsonHttp):
    """POST ``{"image_png": <base64>, "domain": ..}`` -> ``{"label", "confidence"}``."""

    def classify(self, frame, domain, frame_index=None):
        resp = self.post({"image_png": base64.b64encode(encode_png(frame)).decode(), "domain": domain})
        try:
            return Classification(bool(resp["label"]), float(resp.get("confidence", 1.0)))
        except (KeyError, TypeError) as exc:
            raise ClientError(f"bad classifier response {resp!r}") from exc


class HttpLM(_JsonHttp):
    """POST ``{"task", "context", "text", "prompt"}`` -> ``{"text"}``."""

    def complete(self, task, text, context=None):
        resp = self.post({"task": task, "context": context or {}, "text": text,
                          "prompt": render_prompt(task, text, context), "temperature": 0})
        if not isinstance(resp, dict) or not isinstance(resp.get("text"), str):
            raise ClientError(f"bad LM response {resp!r}")
        return resp["text"]
