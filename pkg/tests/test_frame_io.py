import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mednarr._validation import ValidationError
from mednarr.frame_io import (Frame, FormatError, RawVideo, TruncatedStreamError, read_stream, rgb_to_luma,
                              write_stream)
from mednarr.synthetic import SyntheticSpec, generate_synthetic


def header(w, h, num=1, den=1, planes=1):
    return f"NMV1\n{w} {h} {num} {den} {planes}\n".encode()


def test_three_frames_at_half_second_steps():
    data = header(4, 4, 2) + bytes(range(48))
    frames = list(read_stream(data))
    assert [f.t for f in frames] == [0.0, 0.5, 1.0]
    assert all(f.pixels.shape == (4, 4) for f in frames)
    assert frames[1].pixels[0, 0] == 16


def test_truncation_names_payload_offset():
    with pytest.raises(TruncatedStreamError) as err:
        list(read_stream(header(2, 2) + b"\x01\x02\x03"))
    assert err.value.offset == 3
    assert err.value.frame_index == 0
    assert "offset 3" in str(err.value)


def test_truncation_after_whole_frames():
    with pytest.raises(TruncatedStreamError) as err:
        list(read_stream(header(2, 2) + bytes(9)))
    assert (err.value.offset, err.value.frame_index) == (9, 2)


def test_rawvideo_rejects_truncated_file(tmp_path):
    p = tmp_path / "v.nmv"
    p.write_bytes(header(2, 2) + bytes(6))
    with pytest.raises(TruncatedStreamError):
        RawVideo(p)


@pytest.mark.parametrize("data", [
    b"NMV2\n2 2 1 1 1\n",
    b"NMV1\n2 2 1 1\n",
    b"NMV1\n2 2 1 1 2\n",
    b"NMV1\n0 2 1 1 1\n",
    b"NMV1\n2 2 0 1 1\n",
    b"NMV1\n2 2 2 4 1\n",  # non-reduced fps
    b"NMV1\n02 2 1 1 1\n",
    b"NMV1\n2 2 1 1 1",  # no newline
])
def test_malformed_header(data):
    with pytest.raises(FormatError):
        list(read_stream(data))


def test_empty_payload_yields_nothing():
    assert list(read_stream(header(3, 3))) == []


def test_synthetic_ten_seconds_is_one_hundred_frames():
    video, _ = generate_synthetic(SyntheticSpec(duration=10.0), 0)
    assert len(video) == 100
    frames = list(video)
    assert len(frames) == 100
    assert all(f.pixels.size == 307200 for f in frames)
    assert frames[-1].t == pytest.approx(9.9)


def test_color_stream_converts_to_luma():
    rgb = np.array([[[255, 0, 0], [0, 255, 0]], [[0, 0, 255], [255, 255, 255]]], dtype=np.uint8)
    planar = rgb.transpose(2, 0, 1).tobytes()
    (frame,) = list(read_stream(header(2, 2, planes=3) + planar))
    # (299*R + 587*G + 114*B + 500) // 1000 by hand
    assert frame.pixels.tolist() == [[76, 150], [29, 255]]
    assert np.array_equal(frame.color, rgb)


def test_rgb_to_luma_matches_weights():
    rng = np.random.default_rng(3)
    rgb = rng.integers(0, 256, size=(5, 7, 3))
    expect = [[(299 * int(r) + 587 * int(g) + 114 * int(b) + 500) // 1000 for r, g, b in row] for row in rgb]
    assert rgb_to_luma(rgb).tolist() == expect


@st.composite
def raw_streams(draw):
    w = draw(st.integers(1, 6))
    h = draw(st.integers(1, 6))
    planes = draw(st.sampled_from([1, 3]))
    num = draw(st.integers(1, 60))
    den = draw(st.integers(1, 4))
    from math import gcd
    g = gcd(num, den)
    n = draw(st.integers(1, 4))
    payload = draw(st.binary(min_size=n * w * h * planes, max_size=n * w * h * planes))
    return header(w, h, num // g, den // g, planes) + payload


@settings(max_examples=60, deadline=None)
@given(raw_streams())
def test_round_trip_is_byte_exact(data):
    out = io.BytesIO()
    write_stream(read_stream(data), out)
    assert out.getvalue() == data


def test_round_trip_through_file(tmp_path):
    video, _ = generate_synthetic(SyntheticSpec(width=32, height=24, duration=1.0), 1)
    p = tmp_path / "v.nmv"
    with open(p, "wb") as fh:
        write_stream(video, fh)
    raw = RawVideo(p)
    assert len(raw) == len(video) and raw.duration == pytest.approx(1.0)
    for a, b in zip(raw, video):
        assert a.t == b.t and a.same_pixels(b)
    out = io.BytesIO()
    write_stream(raw, out)
    assert out.getvalue() == p.read_bytes()


def test_write_rejects_mixed_sizes():
    frames = [Frame(0.0, np.zeros((2, 2), np.uint8)), Frame(0.1, np.zeros((3, 2), np.uint8))]
    with pytest.raises(ValidationError):
        write_stream(frames, io.BytesIO(), fps=10)


def test_frame_invariants():
    with pytest.raises(ValidationError):
        Frame(-0.1, np.zeros((2, 2), np.uint8))
    with pytest.raises(ValidationError):
        Frame(0.0, np.zeros((0, 2), np.uint8))
    f = Frame(0.0, np.zeros((2, 3), np.uint8))
    assert (f.width, f.height) == (3, 2)
    with pytest.raises(ValueError):
        f.pixels[0, 0] = 1


def test_frame_leaves_caller_array_writeable():
    a = np.zeros((2, 2), np.uint8)
    f = Frame(0.0, a)
    a[0, 0] = 9
    assert f.pixels[0, 0] == 0
