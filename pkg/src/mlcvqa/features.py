"""Deep-feature file format and model-input assembly.

A clip's features are one row per sliding window: 64-frame chunks stridden
by 16, each sampled at step 2 into 32 frame indices. Assembly takes the
encoded and reference feature sequences (T x 2304 each), appends their
difference, and concatenates the window-pooled frame metrics (32 x 11
flattened to 352), producing the final T x 4960 model input.

Feature files use a little-endian binary envelope (magic ``MLCV``) with a
float32 row-major payload and an optional JSON sidecar at ``<path>.json``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .frame_metrics import FrameMetricMatrix

__all__ = [
    "RAW_DIM",
    "STACKED_DIM",
    "ASSEMBLED_DIM",
    "CHUNK_LEN",
    "SAMPLE_STEP",
    "WINDOW_STRIDE",
    "FRAMES_PER_WINDOW",
    "FLAG_FM_ON_AUGMENTED",
    "FeatureSequence",
    "Window",
    "WindowPlan",
    "FeatureFileError",
    "window_plan",
    "write_features",
    "read_features",
    "read_sidecar",
    "assemble_pair",
    "temporal_subsample",
]

RAW_DIM = 2304          # backbone output per window
STACKED_DIM = 4608      # encoded features + difference
POOLED_METRIC_DIM = 352  # 32 sampled frames x 11 metric channels
ASSEMBLED_DIM = 4960    # stacked + pooled frame metrics

CHUNK_LEN = 64
SAMPLE_STEP = 2
WINDOW_STRIDE = 16
FRAMES_PER_WINDOW = CHUNK_LEN // SAMPLE_STEP

_MAGIC = b"MLCV"
_VERSION = 1

# flag bit: frame metrics were computed on augmented frames rather than the
# unaugmented pair
FLAG_FM_ON_AUGMENTED = 0x0001

_KIND_BY_DIM = {RAW_DIM: "raw", STACKED_DIM: "stacked", ASSEMBLED_DIM: "assembled"}


class FeatureFileError(ValueError):
    """Corrupt or non-conforming feature file."""


@dataclass
class FeatureSequence:
    """T x D matrix of per-window features for one clip variant."""

    clip_id: str
    variant: str
    data: np.ndarray
    flags: int = 0

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise ValueError(f"feature data must be 2-D, got shape {self.data.shape}")
        if self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise ValueError(f"feature data must be non-empty, got shape {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ValueError("feature data contains NaN or Inf")

    @property
    def T(self) -> int:
        return self.data.shape[0]

    @property
    def D(self) -> int:
        return self.data.shape[1]

    @property
    def kind(self) -> str:
        """raw (2304), stacked (4608), assembled (4960), or custom."""
        return _KIND_BY_DIM.get(self.D, "custom")


@dataclass(frozen=True)
class Window:
    chunk_start: int
    sampled_indices: tuple[int, ...]


@dataclass
class WindowPlan:
    n_frames: int
    windows: list[Window]

    @property
    def T(self) -> int:
        return len(self.windows)

    @property
    def max_index(self) -> int:
        return max(w.sampled_indices[-1] for w in self.windows)


def window_plan(n_frames: int) -> WindowPlan:
    """Sliding-window plan: 64-frame chunks, stride 16, 32 samples at step 2."""
    if n_frames < CHUNK_LEN:
        raise ValueError(f"clip has {n_frames} frames; need >= {CHUNK_LEN} (no padding)")
    count = (n_frames - CHUNK_LEN) // WINDOW_STRIDE + 1
    windows = []
    for i in range(count):
        start = i * WINDOW_STRIDE
        windows.append(Window(start, tuple(range(start, start + CHUNK_LEN, SAMPLE_STEP))))
    return WindowPlan(n_frames=n_frames, windows=windows)


def _write_str(fh, text: str) -> None:
    raw = text.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise FeatureFileError("string field exceeds 65535 bytes")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)


def _read_exact(fh, n: int, what: str) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise FeatureFileError(f"truncated file while reading {what}: wanted {n} bytes, got {len(raw)}")
    return raw


def _read_str(fh, what: str) -> str:
    (length,) = struct.unpack("<H", _read_exact(fh, 2, f"{what} length"))
    return _read_exact(fh, length, what).decode("utf-8")


def write_features(seq: FeatureSequence, path: str, sidecar: dict | None = None) -> None:
    """Serialize a feature sequence; the optional sidecar dict lands at <path>.json."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<HHII", _VERSION, seq.flags, seq.T, seq.D))
        _write_str(fh, seq.clip_id)
        _write_str(fh, seq.variant)
        fh.write(np.ascontiguousarray(seq.data, dtype="<f4").tobytes())
    if sidecar is not None:
        with open(path + ".json", "w", encoding="utf-8") as fh:
            json.dump(sidecar, fh, indent=2, sort_keys=True)
            fh.write("\n")


def read_features(path: str) -> FeatureSequence:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != _MAGIC:
            raise FeatureFileError(f"{path}: bad magic {magic!r}, expected {_MAGIC!r}")
        version, flags, t, d = struct.unpack("<HHII", _read_exact(fh, 12, "header"))
        if version != _VERSION:
            raise FeatureFileError(f"{path}: unsupported version {version}")
        clip_id = _read_str(fh, "clip_id")
        variant = _read_str(fh, "variant")
        payload = fh.read()
    expected = t * d * 4
    if len(payload) != expected:
        raise FeatureFileError(
            f"{path}: payload is {len(payload)} bytes, header implies {expected} ({t}x{d} float32)"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(t, d)
    if not np.isfinite(data).all():
        raise FeatureFileError(f"{path}: payload contains NaN or Inf")
    return FeatureSequence(clip_id=clip_id, variant=variant, data=data.copy(), flags=flags)


def read_sidecar(path: str) -> dict:
    with open(path + ".json", encoding="utf-8") as fh:
        return json.load(fh)


def assemble_pair(
    enc: FeatureSequence,
    ref: FeatureSequence,
    fm: FrameMetricMatrix,
    plan: WindowPlan,
) -> FeatureSequence:
    """Final model input: [enc | enc - ref | window-pooled frame metrics].

    The encoded and reference sequences must be the same variant and length;
    the frame-metric matrix must cover every sampled frame index.
    """
    if enc.D != RAW_DIM or ref.D != RAW_DIM:
        raise ValueError(f"assembly expects {RAW_DIM}-D inputs, got {enc.D} and {ref.D}")
    if enc.T != ref.T or enc.T != plan.T:
        raise ValueError(f"window-count mismatch: enc {enc.T}, ref {ref.T}, plan {plan.T}")
    if enc.variant != ref.variant:
        raise ValueError(f"variant mismatch: enc {enc.variant!r} vs ref {ref.variant!r}")
    if fm.n_frames <= plan.max_index:
        raise ValueError(
            f"frame metrics cover {fm.n_frames} frames, plan samples up to index {plan.max_index}"
        )
    diff = enc.data - ref.data
    pooled = np.empty((plan.T, fm.values.shape[1] * FRAMES_PER_WINDOW), dtype=np.float32)
    for t, window in enumerate(plan.windows):
        pooled[t] = fm.values[list(window.sampled_indices)].astype(np.float32).reshape(-1)
    data = np.concatenate([enc.data, diff, pooled], axis=1)
    flags = enc.flags | (FLAG_FM_ON_AUGMENTED if fm.variant not in ("none", "") else 0)
    return FeatureSequence(clip_id=enc.clip_id, variant=enc.variant, data=data, flags=flags)


def temporal_subsample(seq: FeatureSequence) -> tuple[FeatureSequence, FeatureSequence]:
    """Split rows by index parity into two half-rate sequences."""
    if seq.T < 2:
        raise ValueError(f"need >= 2 rows to subsample, got {seq.T}")
    even = FeatureSequence(seq.clip_id, seq.variant, seq.data[0::2].copy(), flags=seq.flags)
    odd = FeatureSequence(seq.clip_id, seq.variant, seq.data[1::2].copy(), flags=seq.flags)
    return even, odd
