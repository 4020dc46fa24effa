"""YUV4MPEG2 ("Y4M") container parsing and writing.

Only 4:2:0 content at 8 or 10 bits is supported; all other chroma
subsamplings are rejected with an explicit error. Decoded clips are
immutable (plane arrays are flagged read-only) and safe to share across
threads.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from fractions import Fraction
from typing import BinaryIO, Iterator

import numpy as np

__all__ = [
    "PixelFormat",
    "Frame",
    "VideoClip",
    "Y4MError",
    "Y4MReader",
    "load_y4m",
    "write_y4m",
]

_MAGIC = b"YUV4MPEG2"

# colorspace token -> pixel format; anything else is unsupported
_COLORSPACE_TOKENS = {
    "420": "yuv420p8",
    "420jpeg": "yuv420p8",
    "420mpeg2": "yuv420p8",
    "420paldv": "yuv420p8",
    "420p10": "yuv420p10",
}


class Y4MError(ValueError):
    """Malformed or unsupported Y4M input."""


class PixelFormat(enum.Enum):
    YUV420P8 = "yuv420p8"
    YUV420P10 = "yuv420p10"

    @property
    def bit_depth(self) -> int:
        return 8 if self is PixelFormat.YUV420P8 else 10

    @property
    def max_value(self) -> int:
        return (1 << self.bit_depth) - 1

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.uint8) if self is PixelFormat.YUV420P8 else np.dtype(np.uint16)

    @property
    def bytes_per_sample(self) -> int:
        return 1 if self is PixelFormat.YUV420P8 else 2

    @property
    def colorspace_token(self) -> str:
        # canonical token emitted by write_y4m
        return "420mpeg2" if self is PixelFormat.YUV420P8 else "420p10"


@dataclass(frozen=True)
class Frame:
    """One decoded frame: luma plane plus two half-resolution chroma planes."""

    y: np.ndarray
    u: np.ndarray
    v: np.ndarray

    @property
    def width(self) -> int:
        return self.y.shape[1]

    @property
    def height(self) -> int:
        return self.y.shape[0]

    def validate(self, pixel_format: PixelFormat) -> None:
        h, w = self.y.shape
        if w <= 0 or h <= 0:
            raise ValueError("frame dimensions must be positive")
        ch, cw = (h + 1) // 2, (w + 1) // 2
        for name, plane, shape in (("y", self.y, (h, w)), ("u", self.u, (ch, cw)), ("v", self.v, (ch, cw))):
            if plane.shape != shape:
                raise ValueError(f"plane {name} has shape {plane.shape}, expected {shape}")
            if plane.dtype != pixel_format.dtype:
                raise ValueError(f"plane {name} has dtype {plane.dtype}, expected {pixel_format.dtype}")
        if int(self.y.max(initial=0)) > pixel_format.max_value:
            raise ValueError(f"luma sample exceeds {pixel_format.bit_depth}-bit range")


@dataclass
class VideoClip:
    """An ordered sequence of frames sharing one geometry and pixel format."""

    width: int
    height: int
    frame_rate: Fraction
    frames: list[Frame] = field(default_factory=list)
    pixel_format: PixelFormat = PixelFormat.YUV420P8

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValueError("clip dimensions must be positive")
        if not self.frames:
            raise ValueError("clip must contain at least one frame")
        for i, frame in enumerate(self.frames):
            if frame.y.shape != (self.height, self.width):
                raise ValueError(f"frame {i} is {frame.y.shape[::-1]}, clip is {self.width}x{self.height}")
            frame.validate(self.pixel_format)

    @property
    def n_frames(self) -> int:
        return len(self.frames)


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


class Y4MReader:
    """Streaming Y4M decoder: parses the header eagerly, frames on demand.

    Use as a context manager and iterate to receive one Frame at a time,
    so long clips never need to be fully resident.
    """

    def __init__(self, path: str):
        self._path = path
        self._fh: BinaryIO = open(path, "rb")
        self._offset = 0
        try:
            self._parse_header()
        except Exception:
            self._fh.close()
            raise

    def __enter__(self) -> "Y4MReader":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def close(self) -> None:
        self._fh.close()

    def _read_line(self) -> bytes:
        line = self._fh.readline()
        if not line.endswith(b"\n"):
            raise Y4MError(f"unterminated header line at byte {self._offset}")
        self._offset += len(line)
        return line[:-1]

    def _parse_header(self) -> None:
        line = self._read_line()
        parts = line.split(b" ")
        if parts[0] != _MAGIC:
            raise Y4MError(f"bad magic at byte 0: expected {_MAGIC!r}, got {parts[0][:16]!r}")
        width = height = 0
        rate = None
        colorspace = "420"
        for token in parts[1:]:
            if not token:
                continue
            tag, value = chr(token[0]), token[1:].decode("ascii", "replace")
            if tag == "W":
                width = int(value)
            elif tag == "H":
                height = int(value)
            elif tag == "F":
                num, _, den = value.partition(":")
                rate = Fraction(int(num), int(den))
            elif tag == "C":
                colorspace = value
            # I (interlace), A (aspect), X (comment) are accepted and ignored
        if width <= 0 or height <= 0:
            raise Y4MError(f"header at byte 0 lacks positive W/H (got {width}x{height})")
        if rate is None:
            raise Y4MError("header lacks an F (frame rate) token")
        if colorspace not in _COLORSPACE_TOKENS:
            raise Y4MError(f"unsupported chroma subsampling C{colorspace} (only 4:2:0 8/10-bit)")
        if width % 2 or height % 2:
            raise Y4MError(f"4:2:0 requires even dimensions, got {width}x{height}")
        self.width = width
        self.height = height
        self.frame_rate = rate
        self.pixel_format = PixelFormat(_COLORSPACE_TOKENS[colorspace])

    def _read_plane(self, h: int, w: int) -> np.ndarray:
        fmt = self.pixel_format
        nbytes = h * w * fmt.bytes_per_sample
        raw = self._fh.read(nbytes)
        if len(raw) != nbytes:
            raise Y4MError(
                f"truncated frame payload at byte {self._offset}: expected {nbytes} bytes, got {len(raw)}"
            )
        self._offset += nbytes
        plane = np.frombuffer(raw, dtype="<u2" if fmt.bytes_per_sample == 2 else np.uint8)
        return _freeze(plane.reshape(h, w).astype(fmt.dtype, copy=True))

    def __iter__(self) -> Iterator[Frame]:
        while True:
            marker_offset = self._offset
            line = self._fh.readline()
            if not line:
                return
            if not line.endswith(b"\n"):
                raise Y4MError(f"unterminated FRAME marker at byte {marker_offset}")
            self._offset += len(line)
            if not line.startswith(b"FRAME"):
                raise Y4MError(f"expected FRAME marker at byte {marker_offset}, got {line[:16]!r}")
            ch, cw = self.height // 2, self.width // 2
            y = self._read_plane(self.height, self.width)
            u = self._read_plane(ch, cw)
            v = self._read_plane(ch, cw)
            yield Frame(y, u, v)


def load_y4m(path: str) -> VideoClip:
    """Decode an entire Y4M file into a VideoClip."""
    with Y4MReader(path) as reader:
        frames = list(reader)
        if not frames:
            raise Y4MError(f"no frames in {path}")
        return VideoClip(
            width=reader.width,
            height=reader.height,
            frame_rate=reader.frame_rate,
            frames=frames,
            pixel_format=reader.pixel_format,
        )


def write_y4m(clip: VideoClip, path: str) -> None:
    """Write a clip in canonical form: W/H/F/C header tokens, bare FRAME markers.

    Re-parsing the output yields a field-wise identical clip; files already
    in canonical form round-trip byte-identically.
    """
    fmt = clip.pixel_format
    rate = clip.frame_rate
    header = f"YUV4MPEG2 W{clip.width} H{clip.height} F{rate.numerator}:{rate.denominator} C{fmt.colorspace_token}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        for frame in clip.frames:
            fh.write(b"FRAME\n")
            for plane in (frame.y, frame.u, frame.v):
                if fmt.bytes_per_sample == 2:
                    fh.write(plane.astype("<u2").tobytes())
                else:
                    fh.write(plane.astype(np.uint8).tobytes())
