import time
from dataclasses import dataclass, field

import numpy as np
import pytest

from mednarr.frame_io import Frame, FrameList
from mednarr.stability import StableChunkDetector
from mednarr.synthetic import generate_synthetic, random_spec
from mednarr.trace import MaskRegion, extract_trace

FIXTURE_VIDEOS = 20
FIXTURE_NOISE = (0.0, 3.0, 8.0)


def frames_from(arrays, fps=10):
    """FrameList from a sequence of 2-D uint8 arrays."""
    return FrameList([Frame(i / fps, np.asarray(a, dtype=np.uint8)) for i, a in enumerate(arrays)], fps)


@dataclass
class FixtureResult:
    seed: int
    noise: float
    gt: object
    masks: list
    chunks: list
    traces: list = field(default_factory=list)
    seconds: float = 0.0


def run_fixture_video(seed: int, noise: float) -> FixtureResult:
    video, gt = generate_synthetic(random_spec(seed, noise), seed)
    frames = list(video)
    masks = [MaskRegion(m, "face_detector") for m in gt.masks]
    t0 = time.perf_counter()
    chunks = StableChunkDetector().fit(frames, masks=masks).chunks_
    traces = []
    for ci, c in enumerate(chunks):
        tr = extract_trace(c, frames, masks, chunk_id=ci)
        if tr is not None:
            traces.append(tr)
    return FixtureResult(seed, noise, gt, masks, chunks, traces, time.perf_counter() - t0)


@pytest.fixture(scope="session")
def synthetic_fixture():
    """Stable chunks and traces for the 20-video fixture set (noise 0, 3, 8 in turn)."""
    return [run_fixture_video(s, FIXTURE_NOISE[s % 3]) for s in range(FIXTURE_VIDEOS)]


@pytest.fixture(scope="session")
def bundle_dir(tmp_path_factory):
    """A 60 s synthetic bundle with every sidecar (seed 3)."""
    from mednarr.bundle import write_synthetic_bundle

    return write_synthetic_bundle(tmp_path_factory.mktemp("bundle") / "b3", seed=3).root


ACCEPTANCE_LINES = []


def acceptance(criterion: int, ok: bool, detail: str) -> bool:
    """Record and print one PASS/FAIL line for an acceptance criterion."""
    line = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
