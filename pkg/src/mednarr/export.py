"""Tar shards of narrative samples and the dataset characterization report."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import re
import tarfile
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

from .clients import encode_png

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
SCHEMA_FILE = "sample.schema.json"


class ShardError(RuntimeError):
    pass


class CorruptShardError(ShardError):
    def __init__(self, shard: str, detail: str):
        super().__init__(f"corrupt shard {shard}: {detail}")
        self.shard = shard


def load_schema() -> dict:
    return json.loads(resources.files("mednarr").joinpath("schema", SCHEMA_FILE).read_text())


def sanitize_key(key: str) -> str:
    return re.sub(r"[^A-Za-z0-9_-]", "_", key)


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


@dataclass(frozen=True)
class NarrativeSample:
    key: str
    png: bytes
    record: dict = field(hash=False)

    @property
    def json_bytes(self) -> bytes:
        return _dumps(self.record)


def sample_from_aligned(sample, quality=None) -> NarrativeSample:
    """Serialise an AlignedSample; ``quality`` is the video's QualityMetrics (or None)."""
    key = sanitize_key(sample.sample_id)
    img = sample.image
    q = {"precision_conditioned": None, "precision_unconditioned": None, "asr_error_rate": None}
    if quality is not None:
        q = {k: getattr(quality, k) for k in q}
    record = {
        "key": key,
        "video_id": sample.video_id,
        "domain": sample.domain,
        "subdomains": list(sample.subdomains),
        "cross_domains": list(sample.cross_domains),
        "medical_texts": list(sample.medical_texts),
        "roi_texts": list(sample.roi_texts),
        "traces": [{"chunk_interval": [float(v) for v in tr.chunk_interval],
                    "points": [{"t": p.t, "x": p.x, "y": p.y, "confidence": p.confidence} for p in tr.points]}
                   for tr in sample.traces],
        "bboxes": [b.to_list() for b in sample.bboxes],
        "chunk_interval": [float(v) for v in sample.chunk_interval],
        "image": {"t": float(img.t), "method": img.method, "width": img.frame.width,
                  "height": img.frame.height, "frame_index": int(img.frame_index)},
        "quality": q,
    }
    return NarrativeSample(key, encode_png(img.frame), record)


def shard_hash(key: str) -> int:
    """Stable 64-bit hash of a sample key."""
    return int.from_bytes(hashlib.blake2b(key.encode(), digest_size=8).digest(), "big")


def assign_shards(keys, shard_size: int) -> list:
    """Keys grouped into shards: ordered by key hash, then cut every ``shard_size``."""
    if shard_size < 1:
        raise ValueError("shard_size must be >= 1")
    ordered = sorted(keys, key=lambda k: (shard_hash(k), k))
    return [ordered[i:i + shard_size] for i in range(0, len(ordered), shard_size)]


def _add(tar, name, data):
    info = tarfile.TarInfo(name)
    info.size = len(data)
    info.mtime = 0
    info.mode = 0o644
    info.uid = info.gid = 0
    info.uname = info.gname = ""
    tar.addfile(info, io.BytesIO(data))


def _write_one(path: Path, samples) -> dict:
    buf = io.BytesIO()
    with tarfile.open(fileobj=buf, mode="w", format=tarfile.USTAR_FORMAT) as tar:
        for s in samples:
            _add(tar, f"{s.key}.png", s.png)
            _add(tar, f"{s.key}.json", s.json_bytes)
    data = buf.getvalue()
    tmp = path.with_suffix(".tar.part")
    tmp.write_bytes(data)
    tmp.replace(path)
    return {"path": path.name, "checksum": "sha256:" + hashlib.sha256(data).hexdigest(), "count": len(samples)}


def write_shards(samples, shard_size: int, out_dir, workers: int = 1) -> dict:
    """Write ``shard-NNNNN.tar`` files plus ``manifest.json`` and return the manifest.

    Shards are written by up to ``workers`` threads; the manifest is written
    last.  On any failure every shard of this call is removed.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    by_key = {}
    for s in samples:
        if s.key in by_key:
            raise ValueError(f"duplicate sample key {s.key!r}")
        by_key[s.key] = s
    groups = assign_shards(list(by_key), shard_size)
    paths = [out / f"shard-{i:05d}.tar" for i in range(len(groups))]
    try:
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            entries = list(pool.map(lambda pg: _write_one(pg[0], [by_key[k] for k in pg[1]]),
                                    zip(paths, groups)))
        manifest = {"shards": entries, "total": len(by_key)}
        (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except BaseException:
        for p in paths:
            for q in (p, p.with_suffix(".tar.part")):
                q.unlink(missing_ok=True)
        raise
    return manifest


def _read_one(out: Path, entry: dict) -> list:
    path = out / entry["path"]
    if not path.is_file():
        raise ShardError(f"shard {entry['path']} listed in manifest is missing")
    data = path.read_bytes()
    digest = "sha256:" + hashlib.sha256(data).hexdigest()
    if digest != entry["checksum"]:
        raise CorruptShardError(entry["path"], "checksum mismatch")
    parts = {}
    order = []
    try:
        with tarfile.open(fileobj=io.BytesIO(data), mode="r:") as tar:
            for member in tar:
                stem, dot, ext = member.name.rpartition(".")
                if not member.isfile() or not dot or ext not in ("png", "json") or "/" in member.name:
                    warnings.warn(f"skipping stray file {member.name!r} in {entry['path']}")
                    continue
                if stem not in parts:
                    parts[stem] = {}
                    order.append(stem)
                parts[stem][ext] = tar.extractfile(member).read()
    except tarfile.TarError as exc:
        raise CorruptShardError(entry["path"], str(exc)) from exc
    samples = []
    for key in order:
        p = parts[key]
        if set(p) != {"png", "json"}:
            warnings.warn(f"skipping incomplete sample {key!r} in {entry['path']}")
            continue
        samples.append(NarrativeSample(key, p["png"], json.loads(p["json"])))
    if len(samples) != entry["count"]:
        raise CorruptShardError(entry["path"], f"expected {entry['count']} samples, found {len(samples)}")
    return samples


def read_manifest(shard_dir) -> dict:
    path = Path(shard_dir) / MANIFEST
    if not path.is_file():
        raise ShardError(f"no manifest in {shard_dir}")
    return json.loads(path.read_text())


def read_shards(shard_dir) -> list:
    """All samples of a shard directory, in manifest order, after checksum checks."""
    out = Path(shard_dir)
    samples = []
    for entry in read_manifest(out)["shards"]:
        samples.extend(_read_one(out, entry))
    return samples


# -- characterization ---------------------------------------------------------

def _mean(total, count):
    return None if count == 0 else total / count


@dataclass
class DomainStats:
    samples: int = 0
    unique_images: int = 0
    image_text_pairs: int = 0
    medical_texts: int = 0
    roi_texts: int = 0
    avg_words_per_text: Optional[float] = None
    avg_texts_per_image: Optional[float] = None
    traces: int = 0
    trace_points: int = 0
    bboxes: int = 0
    avg_bbox_width: Optional[float] = None
    avg_bbox_height: Optional[float] = None
    avg_chunk_duration: Optional[float] = None
    total_chunk_duration: float = 0.0


@dataclass
class DatasetReport:
    domains: dict
    total: DomainStats

    def to_dict(self):
        return {"domains": {k: asdict(v) for k, v in sorted(self.domains.items())}, "total": asdict(self.total)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


class _Acc:
    def __init__(self):
        self.images = set()
        self.n = self.pairs = self.med = self.roi = self.words = 0
        self.traces = self.points = self.bboxes = self.bw = self.bh = 0
        self.durs = []  # summed with fsum so the report does not depend on sample order

    def add(self, png_digest, rec):
        self.n += 1
        self.images.add(png_digest)
        texts = rec["medical_texts"] + rec["roi_texts"]
        self.med += len(rec["medical_texts"])
        self.roi += len(rec["roi_texts"])
        self.pairs += len(texts)
        self.words += sum(len(t.split()) for t in texts)
        self.traces += len(rec["traces"])
        self.points += sum(len(tr["points"]) for tr in rec["traces"])
        self.bboxes += len(rec["bboxes"])
        self.bw += sum(b[2] - b[0] for b in rec["bboxes"])
        self.bh += sum(b[3] - b[1] for b in rec["bboxes"])
        a, b = rec["chunk_interval"]
        self.durs.append(b - a)

    def stats(self) -> DomainStats:
        dur = math.fsum(self.durs)
        return DomainStats(
            samples=self.n, unique_images=len(self.images), image_text_pairs=self.pairs,
            medical_texts=self.med, roi_texts=self.roi,
            avg_words_per_text=_mean(self.words, self.pairs),
            avg_texts_per_image=_mean(self.pairs, len(self.images)),
            traces=self.traces, trace_points=self.points, bboxes=self.bboxes,
            avg_bbox_width=_mean(self.bw, self.bboxes), avg_bbox_height=_mean(self.bh, self.bboxes),
            avg_chunk_duration=_mean(dur, self.n), total_chunk_duration=dur,
        )


def characterize_in_memory(samples) -> DatasetReport:
    """Per-domain statistics in one pass over NarrativeSamples.

    Images are counted as unique by PNG content; image-text pairs count every
    medical and ROI text attached to a sample.
    """
    per, total = {}, _Acc()
    for s in samples:
        digest = hashlib.sha256(s.png).digest()
        per.setdefault(s.record["domain"], _Acc()).add(digest, s.record)
        total.add(digest, s.record)
    return DatasetReport({d: a.stats() for d, a in per.items()}, total.stats())


def characterize(shard_dir) -> DatasetReport:
    return characterize_in_memory(read_shards(shard_dir))


_COLUMNS = (("samples", "samples"), ("unique_images", "images"), ("image_text_pairs", "pairs"),
            ("avg_words_per_text", "words/text"), ("avg_texts_per_image", "texts/image"),
            ("traces", "traces"), ("trace_points", "points"), ("bboxes", "bboxes"),
            ("avg_bbox_width", "bbox w"), ("avg_bbox_height", "bbox h"), ("avg_chunk_duration", "chunk s"))


def format_report(report: DatasetReport) -> str:
    """Plain-text table, one row per domain plus a total row."""
    rows = [[name] + [_cell(getattr(st, k)) for k, _ in _COLUMNS] for name, st in sorted(report.domains.items())]
    rows.append(["total"] + [_cell(getattr(report.total, k)) for k, _ in _COLUMNS])
    header = ["domain"] + [label for _, label in _COLUMNS]
    widths = [max(len(r[i]) for r in rows + [header]) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths)))
             for r in [header] + rows]
    return "\n".join(lines) + "\n"


def _cell(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.2f}"
    return str(v)
