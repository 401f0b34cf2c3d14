"""Raw frame streams and the :class:`Frame` type.

The on-disk format is deliberately dumb so that any decoder can feed the
pipeline through a pipe::

    NMV1\\n
    <W> <H> <fps_num> <fps_den> <planes>\\n
    <frame 0 plane 0><frame 0 plane 1>...<frame 1 plane 0>...

Each plane is ``W*H`` unsigned bytes in row-major order.  ``planes`` is 1
(luma only) or 3 (planar R, G, B).  Colour input is converted to luma at
ingest with integer BT.601 weights; the colour planes are kept on the frame
so representative images can be exported in colour.
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass, field
from fractions import Fraction
from typing import BinaryIO, Iterable, Iterator, Optional, Sequence, Union

import numpy as np

from ._validation import ValidationError, check_plane

MAGIC = b"NMV1"
_MAX_HEADER = 128


class FormatError(ValueError):
    """The stream header is malformed."""


class TruncatedStreamError(ValueError):
    """The payload ended partway through a frame."""

    def __init__(self, offset: int, header_size: int, frame_index: int):
        self.offset = offset
        self.absolute_offset = offset + header_size
        self.frame_index = frame_index
        super().__init__(
            f"stream truncated inside frame {frame_index} at payload byte offset {offset} "
            f"(file offset {self.absolute_offset})"
        )


@dataclass(frozen=True, eq=False)
class Frame:
    """One decoded frame: a timestamp and an 8-bit luma plane of shape (H, W)."""

    t: float
    pixels: np.ndarray
    color: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.t < 0:
            raise ValidationError(f"frame time must be non-negative, got {self.t}")
        pixels = check_plane(self.pixels)
        if pixels.flags.writeable:
            # own a read-only copy so the caller's array stays theirs
            pixels = pixels.copy()
            pixels.flags.writeable = False
        object.__setattr__(self, "pixels", pixels)
        if self.color is not None:
            color = np.asarray(self.color, dtype=np.uint8)
            if color.shape != pixels.shape + (3,):
                raise ValidationError(f"color plane shape {color.shape} does not match luma {pixels.shape}")
            object.__setattr__(self, "color", color)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @classmethod
    def from_rgb(cls, t: float, rgb) -> "Frame":
        rgb = np.asarray(rgb, dtype=np.uint8)
        return cls(t, rgb_to_luma(rgb), rgb)

    def same_pixels(self, other: "Frame") -> bool:
        return self.pixels.shape == other.pixels.shape and np.array_equal(self.pixels, other.pixels)


def rgb_to_luma(rgb: np.ndarray) -> np.ndarray:
    """Integer BT.601 luma, rounded half up: (299 R + 587 G + 114 B + 500) // 1000."""
    rgb = np.asarray(rgb, dtype=np.uint32)
    y = (299 * rgb[..., 0] + 587 * rgb[..., 1] + 114 * rgb[..., 2] + 500) // 1000
    return y.astype(np.uint8)


@dataclass(frozen=True)
class StreamHeader:
    width: int
    height: int
    fps: Fraction
    planes: int

    @property
    def frame_bytes(self) -> int:
        return self.width * self.height * self.planes

    def encode(self) -> bytes:
        line = f"{self.width} {self.height} {self.fps.numerator} {self.fps.denominator} {self.planes}\n"
        return MAGIC + b"\n" + line.encode("ascii")

    def time_of(self, index: int) -> float:
        return float(index / self.fps)


def parse_header(fh: BinaryIO) -> tuple[StreamHeader, int]:
    """Read and validate the header; returns it with its size in bytes."""
    magic = fh.read(len(MAGIC) + 1)
    if magic != MAGIC + b"\n":
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    line = fh.readline(_MAX_HEADER)
    if not line.endswith(b"\n"):
        raise FormatError("header line missing or not newline-terminated")
    try:
        fields = line.decode("ascii").split()
    except UnicodeDecodeError as exc:
        raise FormatError("header line is not ASCII") from exc
    if len(fields) != 5 or not all(f.isdigit() for f in fields):
        raise FormatError(f"header must be 'W H fps_num fps_den planes', got {line!r}")
    w, h, num, den, planes = (int(f) for f in fields)
    if w < 1 or h < 1:
        raise FormatError(f"frame size must be positive, got {w}x{h}")
    if num < 1 or den < 1:
        raise FormatError(f"frame rate must be positive, got {num}/{den}")
    if planes not in (1, 3):
        raise FormatError(f"planes must be 1 or 3, got {planes}")
    header = StreamHeader(w, h, Fraction(num, den), planes)
    if header.encode() != magic + line:
        # e.g. leading zeros or a non-reduced fraction; would break round-trips
        raise FormatError(f"header is not in canonical form: {line!r}")
    return header, len(magic) + len(line)


def _frame_from_buffer(buf, header: StreamHeader, index: int) -> Frame:
    w, h = header.width, header.height
    planes = np.frombuffer(buf, dtype=np.uint8).reshape(header.planes, h, w)
    t = header.time_of(index)
    if header.planes == 1:
        return Frame(t, planes[0])
    rgb = np.ascontiguousarray(planes.transpose(1, 2, 0))
    return Frame(t, rgb_to_luma(rgb), rgb)


class FrameStream:
    """Single-pass iterator over a raw frame stream.

    Attributes:
        header: the parsed :class:`StreamHeader` (``fps``, ``width`` ... are
            also exposed directly so the stream can be handed to
            :func:`write_stream`).
    """

    def __init__(self, fh: BinaryIO):
        self._fh = fh
        self.header, self.header_size = parse_header(fh)
        self._index = 0
        self._offset = 0

    fps = property(lambda self: self.header.fps)
    width = property(lambda self: self.header.width)
    height = property(lambda self: self.header.height)
    planes = property(lambda self: self.header.planes)

    def __iter__(self) -> Iterator[Frame]:
        return self

    def __next__(self) -> Frame:
        size = self.header.frame_bytes
        buf = self._fh.read(size)
        if not buf:
            raise StopIteration
        while len(buf) < size:
            more = self._fh.read(size - len(buf))
            if not more:
                raise TruncatedStreamError(self._offset + len(buf), self.header_size, self._index)
            buf += more
        frame = _frame_from_buffer(buf, self.header, self._index)
        self._index += 1
        self._offset += size
        return frame


def read_stream(source: Union[bytes, bytearray, BinaryIO, os.PathLike, str]) -> FrameStream:
    """Open a raw frame stream from bytes, a binary file object, or a path."""
    if isinstance(source, (bytes, bytearray, memoryview)):
        return FrameStream(io.BytesIO(bytes(source)))
    if isinstance(source, (str, os.PathLike)):
        return FrameStream(open(source, "rb"))
    return FrameStream(source)


def write_stream(frames: Iterable[Frame], out: BinaryIO, fps=None, planes: Optional[int] = None) -> int:
    """Write frames in raw format and return the number of bytes written.

    ``fps`` defaults to ``frames.fps`` when ``frames`` is a :class:`FrameStream`
    or :class:`RawVideo`.  ``planes`` defaults to 3 when the first frame has a
    colour plane, else 1.
    """
    if fps is None:
        fps = getattr(frames, "fps", None)
        if fps is None:
            raise ValueError("fps is required")
    fps = Fraction(fps).limit_denominator(1_000_000)
    if planes is None:
        planes = getattr(frames, "planes", None)
    it = iter(frames)
    try:
        first = next(it)
    except StopIteration:
        raise ValueError("cannot write an empty stream (the header needs a frame size)") from None
    if planes is None:
        planes = 3 if first.color is not None else 1
    header = StreamHeader(first.width, first.height, fps, planes)
    written = out.write(header.encode())
    for frame in _chain(first, it):
        if (frame.height, frame.width) != (header.height, header.width):
            raise ValidationError("all frames in a stream must share one size")
        if planes == 1:
            written += out.write(np.ascontiguousarray(frame.pixels).tobytes())
        else:
            if frame.color is None:
                raise ValidationError("a 3-plane stream needs colour frames")
            written += out.write(np.ascontiguousarray(frame.color.transpose(2, 0, 1)).tobytes())
    return written


def _chain(first, rest):
    yield first
    yield from rest


class RawVideo(Sequence[Frame]):
    """Random-access view of a raw frame file, backed by ``np.memmap``.

    Frames are materialised lazily, so multi-minute videos can be scanned
    several times without holding them in memory.
    """

    def __init__(self, path):
        self.path = os.fspath(path)
        with open(self.path, "rb") as fh:
            self.header, self.header_size = parse_header(fh)
        payload = os.path.getsize(self.path) - self.header_size
        size = self.header.frame_bytes
        n, rem = divmod(payload, size)
        if rem:
            raise TruncatedStreamError(n * size + rem, self.header_size, n)
        self._n = n
        if n:
            self._data = np.memmap(
                self.path, dtype=np.uint8, mode="r", offset=self.header_size,
                shape=(n, self.header.planes, self.header.height, self.header.width),
            )
        else:
            self._data = np.zeros((0, self.header.planes, self.header.height, self.header.width), np.uint8)

    fps = property(lambda self: self.header.fps)
    width = property(lambda self: self.header.width)
    height = property(lambda self: self.header.height)
    planes = property(lambda self: self.header.planes)

    @property
    def duration(self) -> float:
        return float(self._n / self.header.fps)

    def __len__(self) -> int:
        return self._n

    def __getitem__(self, index):
        if isinstance(index, slice):
            return [self[i] for i in range(*index.indices(self._n))]
        if index < 0:
            index += self._n
        if not 0 <= index < self._n:
            raise IndexError(index)
        planes = self._data[index]
        t = self.header.time_of(index)
        if self.header.planes == 1:
            return Frame(t, planes[0])
        rgb = np.ascontiguousarray(np.asarray(planes).transpose(1, 2, 0))
        return Frame(t, rgb_to_luma(rgb), rgb)

    def __iter__(self) -> Iterator[Frame]:
        for i in range(self._n):
            yield self[i]


class FrameList(list):
    """A plain list of frames that also carries a frame rate."""

    def __init__(self, frames=(), fps=None):
        super().__init__(frames)
        self.fps = Fraction(fps).limit_denominator(1_000_000) if fps is not None else None

    @property
    def duration(self) -> float:
        if not self:
            return 0.0
        step = float(1 / self.fps) if self.fps else 0.0
        return self[-1].t + step


def video_duration(frames) -> float:
    """Duration in seconds, counting the display time of the last frame."""
    duration = getattr(frames, "duration", None)
    if duration is not None:
        return float(duration)
    if len(frames) == 0:
        return 0.0
    if len(frames) == 1:
        return frames[0].t
    return frames[-1].t + (frames[-1].t - frames[-2].t)


def frame_step(frames) -> float:
    fps = getattr(frames, "fps", None)
    if fps:
        return float(1 / Fraction(fps))
    if len(frames) >= 2:
        return frames[1].t - frames[0].t
    return 0.0
