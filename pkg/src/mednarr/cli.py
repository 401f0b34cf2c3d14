"""Command-line entry point: every stage runnable alone, or the whole corpus with ``run``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from . import pipeline as pl
from .bundle import VideoBundle, write_synthetic_bundle
from .clients import EchoLM, HttpLM, ScriptedLM
from .config import ConfigError, RunConfig, leaf_keys
from .export import ShardError, characterize, format_report, write_shards
from .frame_io import RawVideo
from .gating import gate_video
from .keyframe import KeyFrame, SceneChunk, get_profile
from .stability import StableChunk
from .trace import MaskRegion
from .transcript import Lexicon, load_transcript

log = logging.getLogger("mednarr")


def _config_parent() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("-v", "--verbose", action="store_true")
    g = p.add_argument_group("configuration keys (override file and NARR_* environment)")
    for dotted in leaf_keys():
        g.add_argument(f"--{dotted}", dest=f"cfg:{dotted}", metavar="VALUE", default=argparse.SUPPRESS)
    return p


def _load_config(args) -> RunConfig:
    overrides = {k[4:]: yaml.safe_load(v) for k, v in vars(args).items() if k.startswith("cfg:")}
    return RunConfig.load(args.config, overrides)


def _write_lines(records, out):
    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    _emit(text, out)


def _emit(text, out):
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _read_lines(path):
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def _video_and_bundle(path):
    p = Path(path)
    if p.is_dir():
        bundle = VideoBundle(p)
        return bundle.video(), bundle
    return RawVideo(p), None


def _masks(args, video, bundle, cfg):
    if getattr(args, "masks", None):
        data = json.loads(Path(args.masks).read_text())
        rects = data.get("masks", []) if isinstance(data, dict) else data
        return [MaskRegion(tuple(r), "face_detector").clipped(video.width, video.height) for r in rects]
    if bundle is not None:
        return pl.video_masks(video, pl.make_clients(cfg, bundle).faces)
    return []


# -- subcommands --------------------------------------------------------------

def cmd_synth(args, cfg):
    b = write_synthetic_bundle(args.out, seed=cfg["seed"], noise_sigma=args.noise_sigma, duration=args.duration,
                               domain=args.video_domain, channel_subscribers=args.subscribers)
    print(b.root)
    return 0


def _meta(bundle, video, cfg, clients):
    return pl.build_meta(bundle.meta_dict(), video, bundle.transcript(), clients.speech, cfg["domain"],
                         bundle.video_id)


def cmd_gate(args, cfg):
    video, bundle = _video_and_bundle(args.bundle)
    if bundle is None:
        raise SystemExit("gate needs a bundle directory")
    clients = pl.make_clients(cfg, bundle)
    meta = _meta(bundle, video, cfg, clients)
    report = gate_video(meta, args.medical_fraction, get_profile(meta.domain))
    print(json.dumps(report.to_dict(), sort_keys=True))
    return 0 if report.passed else 1


def cmd_keyframes(args, cfg):
    video, bundle = _video_and_bundle(args.bundle)
    if bundle is None:
        raise SystemExit("keyframes needs a bundle directory")
    clients = pl.make_clients(cfg, bundle)
    meta = _meta(bundle, video, cfg, clients)
    out = pl.run_keyframes(video, get_profile(meta.domain), clients, cfg, bundle.transcript(), meta)
    _write_lines(out["keyframes"], args.out)
    summary = {k: v for k, v in out.items() if k != "keyframes"}
    print(json.dumps(summary, sort_keys=True), file=sys.stderr)
    return 0


def cmd_chunks(args, cfg):
    video, bundle = _video_and_bundle(args.video)
    if args.scene:
        keyframes = [KeyFrame.from_record(r) for r in _read_lines(args.scene)]
        _write_lines([pl.scene_to_record(c) for c in pl.scene_chunks_from(keyframes, video.duration)], args.out)
        return 0
    chunks = pl.run_stability(video, _masks(args, video, bundle, cfg), cfg)
    _write_lines([c.to_record() for c in chunks], args.out)
    return 0


def cmd_traces(args, cfg):
    video, bundle = _video_and_bundle(args.video)
    chunks = [StableChunk.from_record(r) for r in _read_lines(args.chunks)]
    traces = pl.run_traces(video, chunks, _masks(args, video, bundle, cfg), cfg)
    records = []
    for tr in traces:
        records.extend(tr.to_records())
    for tr in traces:
        rec = pl.trace_to_record(tr)
        records.append({"chunk_id": tr.chunk_id, "bbox": rec["bbox"], "chunk_interval": rec["chunk_interval"]})
    _write_lines(records, args.out)
    return 0


def cmd_transcript(args, cfg):
    segments = load_transcript(args.transcript)
    lexicon = Lexicon.load(args.lexicon or cfg["transcript.lexicon"] or "")
    script = args.lm or cfg["clients.lm.script"]
    if cfg["clients.lm.kind"] == "http":
        lm = HttpLM(cfg["clients.lm.url"])
    else:
        lm = ScriptedLM.from_file(script) if script else EchoLM()
    scenes = []
    if args.scene_chunks:
        scenes = [SceneChunk(r["t_start"], r["t_end"]) for r in _read_lines(args.scene_chunks)]
    duration = args.duration if args.duration is not None else max((s.end for s in segments), default=0.0)
    out = pl.run_transcript(segments, lexicon, lm, scenes, duration, cfg)
    _emit(json.dumps(out, indent=2, sort_keys=True) + "\n", args.out)
    return 0


def cmd_align(args, cfg):
    video, bundle = _video_and_bundle(args.bundle)
    if bundle is None:
        raise SystemExit("align needs a bundle directory")
    clients = pl.make_clients(cfg, bundle)
    meta = _meta(bundle, video, cfg, clients)
    keyframes = [KeyFrame.from_record(r) for r in _read_lines(args.keyframes)]
    scenes = pl.scene_chunks_from(keyframes, video.duration)
    stable = [StableChunk.from_record(r) for r in _read_lines(args.chunks)]
    traces = []
    if args.traces:
        by_chunk = {}
        for r in _read_lines(args.traces):
            if "bbox" not in r:
                by_chunk.setdefault(r["chunk_id"], []).append(r)
        for cid, pts in sorted(by_chunk.items()):
            c = stable[cid]
            traces.append(pl.trace_from_record({
                "chunk_id": cid, "chunk_interval": [c.t_start, c.t_end], "frame_size": [video.width, video.height],
                "points": [{k: p[k] for k in ("t", "x", "y", "confidence")} for p in pts]}))
    tx_out = json.loads(Path(args.transcript_out).read_text())
    samples = pl.run_align(bundle.video_id, meta.domain, video, scenes, stable, traces, bundle.transcript(),
                           tx_out, clients, cfg)
    _write_lines([pl.sample_to_record(s) for s in samples], args.out)
    return 0


def cmd_export(args, cfg):
    samples = [pl.sample_from_record(r) for path in args.samples for r in _read_lines(path)]
    manifest = write_shards(samples, cfg["export.shard_size"], args.out)
    print(json.dumps(manifest, indent=2, sort_keys=True))
    return 0


def cmd_run(args, cfg):
    if args.inputs:
        cfg.tree["inputs"] = [str(p) for p in args.inputs]
    run_log = pl.run_pipeline(cfg)
    print(json.dumps(run_log, indent=2, sort_keys=True))
    return 0


def cmd_report(args, cfg):
    report = characterize(args.shards)
    sys.stdout.write(report.to_json() if args.json else format_report(report))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parent = _config_parent()
    parser = argparse.ArgumentParser(prog="mednarr", description="Localized-narrative mining from screen videos.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[parent],
                       help="render a synthetic video bundle with sidecars (seeded by --seed)")
    p.add_argument("out")
    p.add_argument("--noise-sigma", type=float, default=3.0)
    p.add_argument("--duration", type=float, default=60.0)
    p.add_argument("--video-domain", default="General medical illustrations")
    p.add_argument("--subscribers", type=int, default=1000)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gate", parents=[parent], help="apply the video-level inclusion rules")
    p.add_argument("bundle")
    p.add_argument("--medical-fraction", type=float, default=None)
    p.set_defaults(func=cmd_gate)

    p = sub.add_parser("keyframes", parents=[parent], help="detect and classify key-frames")
    p.add_argument("bundle")
    p.add_argument("--out")
    p.set_defaults(func=cmd_keyframes)

    p = sub.add_parser("chunks", parents=[parent], help="stable chunks (or scene chunks with --scene)")
    p.add_argument("video", help="raw video file or bundle directory")
    p.add_argument("--masks", help="JSON mask rectangles")
    p.add_argument("--scene", metavar="KEYFRAMES", help="emit scene chunks built from these key-frames")
    p.add_argument("--out")
    p.set_defaults(func=cmd_chunks)

    p = sub.add_parser("traces", parents=[parent], help="cursor traces and boxes inside stable chunks")
    p.add_argument("video")
    p.add_argument("--chunks", required=True)
    p.add_argument("--masks")
    p.add_argument("--out")
    p.set_defaults(func=cmd_traces)

    p = sub.add_parser("transcript", parents=[parent], help="correct a transcript and extract texts")
    p.add_argument("transcript")
    p.add_argument("--lexicon")
    p.add_argument("--lm", help="scripted LM file (default: clients.lm.script, else echo)")
    p.add_argument("--scene-chunks")
    p.add_argument("--duration", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_transcript)

    p = sub.add_parser("align", parents=[parent], help="bind images, texts and traces into samples")
    p.add_argument("bundle")
    p.add_argument("--keyframes", required=True)
    p.add_argument("--chunks", required=True)
    p.add_argument("--traces")
    p.add_argument("--transcript-out", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("export", parents=[parent], help="write samples into tar shards")
    p.add_argument("samples", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("run", parents=[parent], help="run the full pipeline over a corpus")
    p.add_argument("inputs", nargs="*", help="bundle directories (default: config inputs)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", parents=[parent], help="characterise a shard directory")
    p.add_argument("shards")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except pl.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (FileNotFoundError, ValueError, ShardError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
