"""Per-video stage graph, stage cache and corpus runner."""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import clients as cl
from .align import (align_video, assign_segments, classify_subdomains, detect_cross_domain, pad_chunks,
                    representative_images)
from .bundle import VideoBundle
from .config import RunConfig
from .export import (NarrativeSample, characterize_in_memory, format_report, read_manifest, sample_from_aligned,
                     write_shards)
from .gating import (NarrativeUndetermined, VideoMeta, gate_video, is_narrative, is_narrative_nonstatic,
                     narrative_streaks)
from .keyframe import (KeyFrame, SceneChunk, build_scene_chunks, classify_keyframes, detect_keyframes,
                       get_profile, medical_fraction, unclassified_count)
from .stability import StableChunk, StableChunkDetector
from .trace import MaskRegion, Trace, TracePoint, extract_trace, trace_to_bbox
from .transcript import (ExtractedText, Lexicon, LexiconError, QualityMetrics,
                         TranscriptSegment, correct, count_words, detect_errors, extract_medical_roi,
                         quality_metrics)

log = logging.getLogger(__name__)

STAGES = ("gate", "keyframes", "chunks", "stability", "traces", "transcript", "align", "export")
# bump a stage's version when its output format or semantics change
STAGE_VERSION = {s: 1 for s in STAGES}


class StageError(RuntimeError):
    def __init__(self, stage: str, input_hash: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed (input {input_hash[:16]}): {cause}")
        self.stage = stage
        self.input_hash = input_hash
        self.cause = cause


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def json_digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _opt_digest(path) -> Optional[str]:
    return file_digest(path) if path is not None and Path(path).is_file() else None


class StageCache:
    """JSON stage outputs stored under ``<root>/<stage>/<key>.json``; None root disables caching."""

    def __init__(self, root):
        self.root = Path(root) if root is not None else None

    @staticmethod
    def key(stage: str, config_subset, inputs) -> str:
        return json_digest({"stage": stage, "version": STAGE_VERSION[stage], "config": config_subset,
                            "inputs": inputs})

    def _path(self, stage, key):
        return self.root / stage / f"{key}.json"

    def load(self, stage, key):
        if self.root is None:
            return None
        p = self._path(stage, key)
        if not p.is_file():
            return None
        try:
            return json.loads(p.read_text())
        except json.JSONDecodeError:
            log.warning("ignoring unreadable cache entry %s", p)
            return None

    def store(self, stage, key, value):
        if self.root is None:
            return
        p = self._path(stage, key)
        p.parent.mkdir(parents=True, exist_ok=True)
        tmp = p.with_suffix(".part")
        tmp.write_text(json.dumps(value, sort_keys=True))
        tmp.replace(p)


# -- clients ------------------------------------------------------------------

@dataclass
class Clients:
    classifier: object
    lm: object
    embedding: object
    speech: Optional[object]
    faces: object
    digests: dict = field(default_factory=dict)


def _script(explicit, bundle_file):
    if explicit:
        return Path(explicit)
    return bundle_file


def make_clients(cfg: RunConfig, bundle: Optional[VideoBundle]) -> Clients:
    """Build the service clients named in ``clients.*``; mock scripts default to the bundle's sidecars."""
    c = cfg.section("clients")
    opt = bundle.optional if bundle is not None else (lambda name: None)
    digests = {}

    kind = c["classifier"]["kind"]
    if kind == "scripted":
        path = _script(c["classifier"]["script"], opt("classifier"))
        if path is None:
            raise FileNotFoundError("scripted classifier needs clients.classifier.script or classifier.json")
        classifier = cl.ScriptedClassifier.from_file(path)
        digests["classifier"] = file_digest(path)
    elif kind == "constant":
        classifier = cl.ConstantClassifier(bool(c["classifier"]["label"]))
        digests["classifier"] = f"constant:{c['classifier']['label']}"
    elif kind == "http":
        classifier = cl.HttpClassifier(c["classifier"]["url"])
        digests["classifier"] = f"http:{c['classifier']['url']}"
    else:
        raise ValueError(f"unknown classifier kind {kind!r}")

    kind = c["lm"]["kind"]
    if kind == "scripted":
        path = _script(c["lm"]["script"], opt("lm"))
        lm = cl.ScriptedLM.from_file(path) if path is not None else cl.EchoLM()
        digests["lm"] = file_digest(path) if path is not None else "echo"
    elif kind == "echo":
        lm, digests["lm"] = cl.EchoLM(), "echo"
    elif kind == "http":
        lm, digests["lm"] = cl.HttpLM(c["lm"]["url"]), f"http:{c['lm']['url']}"
    else:
        raise ValueError(f"unknown lm kind {kind!r}")

    if c["embedding"]["kind"] != "luma":
        raise ValueError(f"unknown embedding kind {c['embedding']['kind']!r}")
    embedding = cl.LumaEmbedding(int(c["embedding"]["size"]))
    digests["embedding"] = f"luma:{c['embedding']['size']}"

    speech = None
    if c["speech"]["kind"] == "sidecar":
        path = _script(c["speech"]["path"], opt("speech"))
        if path is not None:
            speech = cl.SidecarSpeechSegmenter(path)
            digests["speech"] = file_digest(path)
    elif c["speech"]["kind"] != "none":
        raise ValueError(f"unknown speech kind {c['speech']['kind']!r}")

    faces = cl.NoFaces()
    if c["faces"]["kind"] == "sidecar":
        path = _script(c["faces"]["path"], opt("faces"))
        if path is not None:
            faces = cl.SidecarFaceDetector(path)
            digests["faces"] = file_digest(path)
    elif c["faces"]["kind"] != "none":
        raise ValueError(f"unknown faces kind {c['faces']['kind']!r}")
    return Clients(classifier, lm, embedding, speech, faces, digests)


# -- stage bodies (pure functions over loaded inputs) -------------------------

def build_meta(bundle_meta: dict, video, transcript, speech, default_domain: str, video_id: str) -> VideoMeta:
    duration = float(bundle_meta.get("duration") or video.duration)
    has_speech = bundle_meta.get("has_speech")
    if has_speech is None:
        if transcript is not None:
            has_speech = any(s.text.strip() for s in transcript)
        elif speech is not None:
            has_speech = any(b > a and a < 60.0 for a, b in speech.speech_intervals(seconds=60.0))
        else:
            has_speech = False
    return VideoMeta(duration, bool(has_speech), int(bundle_meta.get("channel_subscribers", 0)),
                     str(bundle_meta.get("domain") or default_domain), video_id)


def video_masks(video, faces) -> list:
    """Face rectangles found on the first, middle and last frames."""
    n = len(video)
    seen, out = set(), []
    for i in sorted({0, n // 2, n - 1}):
        for m in faces.detect(video[i]):
            if m.rect not in seen:
                seen.add(m.rect)
                out.append(m)
    return out


def run_keyframes(video, profile, clients: Clients, cfg: RunConfig, transcript=None, meta=None) -> dict:
    k = cfg.section("keyframe")
    params = {"adaptive_k": k["adaptive_k"], "min_threshold": k["min_threshold"]}
    if k["threshold"] is not None:
        profile = get_profile(profile.name, scene_change_threshold=float(k["threshold"]))
    keyframes = detect_keyframes(video, profile, **params)
    keyframes = classify_keyframes(keyframes, video, clients.classifier, profile.name, retries=k["retries"])
    frac = medical_fraction(keyframes)
    n = cfg.section("narrative")
    overrides = {}
    if n["streak_percent"] is not None:
        overrides["narrative_streak_percent"] = float(n["streak_percent"])
    if n["min_speech_seconds"] is not None:
        overrides["min_speech_seconds"] = float(n["min_speech_seconds"])
    prof = get_profile(profile.name, **overrides) if overrides else profile
    narrative, streaks, candidates, undetermined = None, None, None, None
    try:
        if prof.static:
            res = narrative_streaks(keyframes, video, clients.embedding, n["streak_candidates"],
                                    seed=cfg["seed"], threshold=n["similarity"])
            streaks, candidates = res.streaks, res.candidates
            narrative = is_narrative(res.streaks, res.candidates, prof)
        else:
            narrative = is_narrative_nonstatic(keyframes, transcript, prof, clients.speech,
                                               (n["window_before"], n["window_after"]))
    except NarrativeUndetermined as exc:
        undetermined = str(exc)
        narrative = False
    out = {"threshold": profile.scene_change_threshold, "keyframes": [kf.to_record() for kf in keyframes],
           "medical_fraction": frac, "unclassified": unclassified_count(keyframes), "narrative": narrative,
           "streaks": streaks, "candidates": candidates, "undetermined": undetermined}
    if meta is not None:
        out["report"] = gate_video(meta, frac, prof, narrative, streaks).to_dict()
    return out


def scene_chunks_from(keyframes, duration) -> list:
    return build_scene_chunks(keyframes, duration)


def scene_to_record(sc: SceneChunk) -> dict:
    return {"t_start": sc.t_start, "t_end": sc.t_end, "keyframes": [k.frame_index for k in sc.keyframes],
            "medical": sc.medical}


def scene_from_record(rec: dict, by_index: dict) -> SceneChunk:
    return SceneChunk(rec["t_start"], rec["t_end"], tuple(by_index[i] for i in rec["keyframes"]), rec["medical"])


def run_stability(video, masks, cfg: RunConfig) -> list:
    s = cfg.section("stability")
    det = StableChunkDetector(random_state=cfg["seed"], **s)
    return det.fit(video, masks=masks).chunks_


def run_traces(video, stable_chunks, masks, cfg: RunConfig) -> list:
    t = cfg.section("trace")
    traces = []
    for ci, chunk in enumerate(stable_chunks):
        tr = extract_trace(chunk, video, masks, t["noise_threshold"], t["min_trace_points"], chunk_id=ci)
        if tr is not None:
            traces.append(tr)
    return traces


def trace_to_record(tr: Trace) -> dict:
    return {"chunk_id": tr.chunk_id, "chunk_interval": list(tr.chunk_interval), "frame_size": list(tr.frame_size),
            "points": [{"t": p.t, "x": p.x, "y": p.y, "confidence": p.confidence} for p in tr.points],
            "bbox": trace_to_bbox(tr).to_list()}


def trace_from_record(rec: dict) -> Trace:
    return Trace(rec["chunk_id"], [TracePoint(p["t"], p["x"], p["y"], p["confidence"]) for p in rec["points"]],
                 None, tuple(rec["chunk_interval"]), tuple(rec["frame_size"]))


def load_lexicon(cfg: RunConfig, bundle: Optional[VideoBundle]) -> Lexicon:
    path = cfg["transcript.lexicon"] or (bundle.optional("lexicon") if bundle is not None else None)
    if path is None:
        raise LexiconError("no lexicon: set transcript.lexicon or add lexicon.txt to the bundle")
    return Lexicon.load(path)


def run_transcript(segments, lexicon, lm, scene_chunks, duration, cfg: RunConfig) -> dict:
    t = cfg.section("transcript")
    if not segments:
        return {"segments": [], "records": [], "texts": [], "failures": [], "total_words": 0,
                "metrics": quality_metrics([], 0).to_dict()}
    candidates = detect_errors(segments, lexicon, ngram_cutoff=t["ngram_cutoff"])
    corrected, records = correct(segments, candidates, lm, lexicon)
    padded = pad_chunks(scene_chunks, cfg["align.pad_time"], duration)
    failures = []
    texts = extract_medical_roi(assign_segments(padded, corrected), lm, tuple(t["deictic"]), failures)
    total = count_words(segments)
    return {"segments": [s.to_record() for s in corrected], "records": [r.to_dict() for r in records],
            "texts": [{"kind": x.kind, "text": x.text, "sources": list(x.sources), "chunk_id": x.chunk_id}
                      for x in texts],
            "failures": failures, "total_words": total, "metrics": quality_metrics(records, total).to_dict()}


def metrics_from_dict(d: dict) -> QualityMetrics:
    keys = ("precision_conditioned", "precision_unconditioned", "asr_error_rate")
    return QualityMetrics(*(d[k] for k in keys), {k: v for k, v in d.items() if k not in keys})


def texts_from_records(recs) -> list:
    return [ExtractedText(r["kind"], r["text"], tuple(r["sources"]), r["chunk_id"]) for r in recs]


def run_align(video_id, domain, video, scene_chunks, stable_chunks, traces, raw_segments, transcript_out,
              clients: Clients, cfg: RunConfig) -> list:
    a = cfg.section("align")
    corrected = [TranscriptSegment.from_record(r) for r in transcript_out["segments"]]
    images = representative_images(scene_chunks, stable_chunks, video, video_id, a["dedup_threshold"])
    subdomains = classify_subdomains(corrected, clients.lm, a["subdomains"]).labels if a["subdomains"] else ()
    cross = detect_cross_domain(corrected, clients.lm, clients.classifier, images)
    samples = align_video(video_id, domain, video, scene_chunks, stable_chunks, traces, raw_segments or [],
                          texts_from_records(transcript_out["texts"]), a["pad_time"], a["lookback"],
                          a["lookahead"], subdomains, cross, images=images, duration=video.duration)
    metrics = metrics_from_dict(transcript_out["metrics"])
    return [sample_from_aligned(s, metrics) for s in samples]


def sample_to_record(s: NarrativeSample) -> dict:
    return {"key": s.key, "png": base64.b64encode(s.png).decode(), "record": s.record}


def sample_from_record(rec: dict) -> NarrativeSample:
    return NarrativeSample(rec["key"], base64.b64decode(rec["png"]), rec["record"])


# -- per-video runner ---------------------------------------------------------

@dataclass
class VideoResult:
    video_id: str
    stages: dict
    report: dict
    samples: list = field(default_factory=list)
    quality: Optional[dict] = None


class _Runner:
    def __init__(self, cache: StageCache):
        self.cache = cache
        self.status = {}

    def stage(self, name, config_subset, inputs, body):
        key = StageCache.key(name, config_subset, inputs)
        hit = self.cache.load(name, key)
        if hit is not None:
            self.status[name] = "cached"
            return hit, key
        t0 = time.perf_counter()
        try:
            out = body()
        except Exception as exc:
            raise StageError(name, key, exc) from exc
        self.cache.store(name, key, out)
        self.status[name] = "ran"
        log.info("stage %s ran in %.2fs", name, time.perf_counter() - t0)
        return out, key


def run_video(bundle_dir, cfg: RunConfig) -> VideoResult:
    """Run every per-video stage in order, stopping early when the gate rejects."""
    bundle = VideoBundle(bundle_dir)
    cache_root = cfg["cache"] or str(Path(cfg["output"]) / "cache")
    run = _Runner(StageCache(cache_root))
    clients = make_clients(cfg, bundle)
    video = bundle.video()
    vid = bundle.video_id
    transcript = bundle.transcript()
    video_hash = file_digest(bundle.path("video"))
    transcript_hash = _opt_digest(bundle.optional("transcript"))
    meta_hash = _opt_digest(bundle.optional("meta"))
    digests = clients.digests

    meta = build_meta(bundle.meta_dict(), video, transcript, clients.speech, cfg["domain"], vid)
    profile = get_profile(meta.domain)
    gate, gate_key = run.stage("gate", {"domain": cfg["domain"]},
                               [meta_hash, transcript_hash, digests.get("speech"), video.duration],
                               lambda: {"report": gate_video(meta, None, profile).to_dict()})
    if not gate["report"]["passed"]:
        return VideoResult(vid, run.status, gate["report"])

    kf_cfg = {"keyframe": cfg.section("keyframe"), "narrative": cfg.section("narrative"), "seed": cfg["seed"]}
    kf_out, kf_key = run.stage(
        "keyframes", kf_cfg,
        [gate_key, video_hash, digests["classifier"], digests["embedding"], digests.get("speech"), transcript_hash],
        lambda: run_keyframes(video, profile, clients, cfg, transcript, meta))
    if not kf_out["report"]["passed"]:
        return VideoResult(vid, run.status, kf_out["report"])
    keyframes = [KeyFrame.from_record(r) for r in kf_out["keyframes"]]
    by_index = {k.frame_index: k for k in keyframes}

    chunks_out, chunks_key = run.stage(
        "chunks", {}, [kf_key, video.duration],
        lambda: {"scene_chunks": [scene_to_record(c) for c in scene_chunks_from(keyframes, video.duration)]})
    scenes = [scene_from_record(r, by_index) for r in chunks_out["scene_chunks"]]

    def masks():
        return video_masks(video, clients.faces)

    stab_out, stab_key = run.stage(
        "stability", {"stability": cfg.section("stability"), "seed": cfg["seed"]},
        [video_hash, digests.get("faces")],
        lambda: {"chunks": [c.to_record() for c in run_stability(video, masks(), cfg)],
                 "masks": [list(m.rect) for m in masks()]})
    stable = [StableChunk.from_record(r) for r in stab_out["chunks"]]
    mask_regions = [MaskRegion(tuple(r), "face_detector") for r in stab_out["masks"]]

    tr_out, tr_key = run.stage(
        "traces", {"trace": cfg.section("trace")}, [stab_key, video_hash],
        lambda: {"traces": [trace_to_record(t) for t in run_traces(video, stable, mask_regions, cfg)]})
    traces = [trace_from_record(r) for r in tr_out["traces"]]

    def transcript_body():
        lexicon = load_lexicon(cfg, bundle) if transcript else None
        return run_transcript(transcript, lexicon, clients.lm, scenes, video.duration, cfg)

    lex_path = cfg["transcript.lexicon"] or bundle.optional("lexicon")
    tx_out, tx_key = run.stage(
        "transcript", {"transcript": cfg.section("transcript"), "pad_time": cfg["align.pad_time"]},
        [chunks_key, transcript_hash, _opt_digest(lex_path), digests["lm"]], transcript_body)

    al_out, _ = run.stage(
        "align", {"align": cfg.section("align"), "domain": meta.domain},
        [chunks_key, stab_key, tr_key, tx_key, video_hash, transcript_hash, digests["lm"], digests["classifier"]],
        lambda: {"samples": [sample_to_record(s) for s in run_align(vid, meta.domain, video, scenes, stable, traces,
                                                                    transcript, tx_out, clients, cfg)]})
    samples = [sample_from_record(r) for r in al_out["samples"]]
    return VideoResult(vid, run.status, kf_out["report"], samples, tx_out["metrics"])


def _run_one(args):
    bundle_dir, tree = args
    return run_video(bundle_dir, RunConfig(tree))


def run_pipeline(cfg: RunConfig, workers: Optional[int] = None) -> dict:
    """Run a corpus: per-video stages (optionally in parallel), then export and report.

    Writes under ``output``: ``resolved_config.yaml``, ``shards/`` (tar shards
    plus manifest), ``report.json``, ``report.txt`` and ``run_log.json``
    (stage statuses).  Returns the run log.
    """
    out = Path(cfg["output"])
    cfg.write_manifest(out)
    inputs = list(cfg["inputs"])
    workers = workers or cfg["workers"]
    jobs = [(b, cfg.tree) for b in inputs]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]

    samples = sorted((s for r in results for s in r.samples), key=lambda s: s.key)
    export_key = StageCache.key("export", cfg.section("export"), [json_digest(sample_to_record(s)) for s in samples])
    shard_dir = out / "shards"
    stamp = shard_dir / ".stage_key"
    if stamp.is_file() and stamp.read_text() == export_key and (shard_dir / "manifest.json").is_file():
        export_status = "cached"
        read_manifest(shard_dir)
    else:
        try:
            for old in shard_dir.glob("shard-*.tar"):
                old.unlink()
            write_shards(samples, cfg["export.shard_size"], shard_dir)
        except Exception as exc:
            raise StageError("export", export_key, exc) from exc
        stamp.write_text(export_key)
        export_status = "ran"

    dataset = characterize_in_memory(samples)
    report = {
        "videos": {r.video_id: {"gate": r.report, "quality": r.quality, "samples": len(r.samples)}
                   for r in sorted(results, key=lambda r: r.video_id)},
        "dataset": dataset.to_dict(),
    }
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    (out / "report.txt").write_text(format_report(dataset))
    run_log = {"videos": {r.video_id: r.stages for r in results}, "export": export_status}
    (out / "run_log.json").write_text(json.dumps(run_log, indent=2, sort_keys=True) + "\n")
    return run_log
