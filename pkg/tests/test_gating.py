import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mednarr.clients import LumaEmbedding, ScriptedEmbedding
from mednarr.gating import (RULES, NarrativeUndetermined, VideoMeta, contiguous_speech, cosine_similarity,
                            gate_video, is_narrative, is_narrative_nonstatic, is_streak, merge_intervals,
                            narrative_streaks)
from mednarr.keyframe import PROFILES, KeyFrame, get_profile
from mednarr.transcript import TranscriptSegment

from conftest import frames_from


def meta(duration=600.0, speech=True, subs=1000, domain="CT"):
    return VideoMeta(duration, speech, subs, domain)


def test_short_video_fails_duration_min():
    r = gate_video(meta(30.0), 50.0, get_profile("CT"))
    assert not r.passed and r.failed_rules == ("duration_min",)


def test_big_channel_fails_subscribers():
    r = gate_video(meta(subs=2_000_000), 50.0, get_profile("CT"))
    assert r.failed_rules == ("subscribers",)


def test_mri_six_percent_passes():
    assert gate_video(meta(domain="MRI"), 6.0, get_profile("MRI")).passed


def test_all_failures_reported_in_order():
    r = gate_video(meta(30.0, False, 5_000_000), 1.0, get_profile("CT"), narrative=False)
    assert r.failed_rules == ("duration_min", "speech", "subscribers", "medical_fraction", "narrative")
    assert set(r.failed_rules) <= set(RULES)


@pytest.mark.parametrize("duration,ok", [(59.999, False), (60.0, True), (7200.0, True), (7201.0, False)])
def test_duration_bounds_inclusive(duration, ok):
    assert gate_video(meta(duration), None, get_profile("CT")).passed is ok


@pytest.mark.parametrize("subs,ok", [(1_000_000, True), (1_000_001, False), (0, True)])
def test_subscriber_bound(subs, ok):
    assert gate_video(meta(subs=subs), None, get_profile("CT")).passed is ok


def test_passed_iff_no_failed_rules():
    for d, s, n, f in itertools.product([30, 600, 9000], [True, False], [10, 10**7], [None, 0.0, 99.0]):
        r = gate_video(meta(d, s, n), f, get_profile("CT"))
        assert r.passed == (not r.failed_rules)


# brute-force oracle for the rule set, evaluated in any order
def _rule_checks(m, frac, profile, narrative):
    return {
        "duration_min": m.duration >= 60,
        "duration_max": m.duration <= 7200,
        "speech": m.has_speech,
        "subscribers": m.channel_subscribers <= 1_000_000,
        "medical_fraction": frac is None or frac >= profile.medical_percent_threshold,
        "narrative": narrative is not False,
    }


@settings(max_examples=150, deadline=None)
@given(st.floats(0.5, 10000), st.booleans(), st.integers(0, 3_000_000), st.one_of(st.none(), st.floats(0, 100)),
       st.sampled_from(sorted(PROFILES)), st.sampled_from([None, True, False]), st.randoms())
def test_rule_order_invariance(duration, speech, subs, frac, domain, narrative, rnd):
    m = VideoMeta(duration, speech, subs, domain)
    profile = get_profile(domain)
    checks = list(_rule_checks(m, frac, profile, narrative).items())
    rnd.shuffle(checks)
    passed = all(ok for _, ok in checks)
    r = gate_video(m, frac, profile, narrative)
    assert r.passed == passed
    assert set(r.failed_rules) == {k for k, ok in checks if not ok}


def test_meta_invariants():
    with pytest.raises(ValueError):
        VideoMeta(0, True, 0, "CT")
    with pytest.raises(ValueError):
        VideoMeta(10, True, -1, "CT")


# -- streaks -----------------------------------------------------------------

def _medical_kfs(n):
    return [KeyFrame(i, float(i), 0.5, medical=True) for i in range(n)]


def test_four_identical_frames_one_streak():
    frames = frames_from([np.full((8, 8), 77)] * 4, fps=1)
    res = narrative_streaks(_medical_kfs(4), frames, LumaEmbedding(4))
    assert (res.streaks, res.candidates) == (1, 1)
    assert res.similarities[0] == pytest.approx([1.0, 1.0, 1.0], abs=1e-12)


def test_orthogonal_embeddings_no_streak():
    frames = frames_from([np.zeros((2, 2))] * 4, fps=1)
    emb = ScriptedEmbedding({i: np.eye(4)[i] for i in range(4)})
    res = narrative_streaks(_medical_kfs(4), frames, emb)
    assert (res.streaks, res.candidates) == (0, 1)
    assert res.similarities[0] == [0.0, 0.0, 0.0]


def _embedding_with_sims(sims):
    """Base vector e0 and three vectors at the requested cosines to it."""
    vecs = {0: np.array([1.0, 0, 0, 0])}
    for j, s in enumerate(sims, start=1):
        v = np.zeros(4)
        v[0] = s
        v[j] = np.sqrt(1 - s * s)
        vecs[j] = v
    return ScriptedEmbedding(vecs)


@pytest.mark.parametrize("sims,streak", [((0.95, 0.92, 0.89), False), ((0.90, 0.90, 0.90), True),
                                         ((0.99, 0.99, 0.99), True), ((0.9, 0.9, 0.8999), False)])
def test_streak_needs_all_three(sims, streak):
    frames = frames_from([np.zeros((2, 2))] * 4, fps=1)
    res = narrative_streaks(_medical_kfs(4), frames, _embedding_with_sims(sims))
    assert res.streaks == int(streak)
    assert is_streak(sims) is streak


def test_embedding_failure_counts_unevaluated():
    frames = frames_from([np.zeros((2, 2))] * 5, fps=1)
    emb = ScriptedEmbedding({i: np.ones(3) for i in range(4)})  # frame 4 missing
    res = narrative_streaks(_medical_kfs(5), frames, emb)
    assert (res.candidates, res.unevaluated, res.streaks) == (1, 1, 1)


def test_candidates_need_three_successors_and_are_capped():
    frames = frames_from([np.full((4, 4), 50)] * 40, fps=1)
    kfs = _medical_kfs(40)
    res = narrative_streaks(kfs, frames, LumaEmbedding(4), max_candidates=16, seed=3)
    assert res.candidates == 16
    assert narrative_streaks(kfs, frames, LumaEmbedding(4), max_candidates=16, seed=3).similarities == \
        res.similarities
    assert narrative_streaks(_medical_kfs(3), frames, LumaEmbedding(4)).candidates == 0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=16))
def test_self_cosine_is_one(v):
    v = np.asarray(v)
    if np.linalg.norm(v) == 0 or not np.isfinite(np.linalg.norm(v)):
        return
    assert abs(cosine_similarity(v, v) - 1.0) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(1e-3, 1e3), min_size=4, max_size=4), st.integers(0, 2**31))
def test_streak_scale_invariant(scales, seed):
    rng = np.random.default_rng(seed)
    base = rng.normal(size=6)
    vecs = [base + 0.3 * rng.normal(size=6) for _ in range(3)]
    sims = [cosine_similarity(base, v) for v in vecs]
    scaled = [cosine_similarity(scales[0] * base, s * v) for s, v in zip(scales[1:], vecs)]
    assert is_streak(sims) == is_streak(scaled)


def test_is_narrative_examples():
    ct = get_profile("CT", narrative_streak_percent=40)
    assert is_narrative(5, 10, ct)
    assert is_narrative(4, 10, ct)  # boundary is inclusive
    assert not is_narrative(3, 10, ct)
    for pct in (0.1, 30, 100):
        assert not is_narrative(0, 10, get_profile("CT", narrative_streak_percent=pct))
    with pytest.raises(NarrativeUndetermined):
        is_narrative(0, 0, ct)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 50), st.data(), st.floats(0, 100))
def test_adding_streaks_is_monotone(cands, data, pct):
    a = data.draw(st.integers(0, cands))
    b = data.draw(st.integers(a, cands))
    p = get_profile("CT", narrative_streak_percent=pct)
    assert not (is_narrative(a, cands, p) and not is_narrative(b, cands, p))


# -- non-static narrative ------------------------------------------------------

def _seg(a, b, text="words here"):
    return TranscriptSegment(a, b, text)


def test_full_speech_is_narrative():
    kfs = [KeyFrame(i, 30.0 * i + 10, 0.5, medical=True) for i in range(5)]
    tr = [_seg(0, 200)]
    for m in (0.5, 3, 10, 20):
        assert is_narrative_nonstatic(kfs, tr, get_profile("Surgery", min_speech_seconds=m))


def test_silent_transcript_not_narrative():
    kfs = [KeyFrame(i, 30.0 * i + 10, 0.5, medical=True) for i in range(5)]
    assert not is_narrative_nonstatic(kfs, [], get_profile("Surgery"))
    assert not is_narrative_nonstatic(kfs, [_seg(0, 200, "  ")], get_profile("Surgery"))


def test_three_of_five_with_four_seconds():
    times = [10, 50, 90, 130, 170]
    kfs = [KeyFrame(i, float(t), 0.5, medical=True) for i, t in enumerate(times)]
    tr = [_seg(t + 1, t + 5) for t in times[:3]]
    assert is_narrative_nonstatic(kfs, tr, get_profile("Surgery", min_speech_seconds=3))
    # two of five is not more than half
    assert not is_narrative_nonstatic(kfs, tr[:2], get_profile("Surgery", min_speech_seconds=3))


def test_speech_is_contiguous_not_summed():
    kfs = [KeyFrame(0, 10.0, 0.5, medical=True)]
    tr = [_seg(9, 10.5), _seg(11, 12.5)]  # 3 s total but longest run 1.5 s
    assert not is_narrative_nonstatic(kfs, tr, get_profile("Surgery", min_speech_seconds=3))
    assert contiguous_speech(merge_intervals([(0, 2), (1, 5), (7, 8)]), 0, 10) == 5


def test_segmenter_fallback_and_undetermined():
    class Seg:
        def speech_intervals(self, pcm=None, seconds=60.0):
            return [(0, 100)]

    kfs = [KeyFrame(0, 10.0, 0.5, medical=True)]
    assert is_narrative_nonstatic(kfs, None, get_profile("Surgery"), segmenter=Seg())
    with pytest.raises(NarrativeUndetermined):
        is_narrative_nonstatic(kfs, None, get_profile("Surgery"))
