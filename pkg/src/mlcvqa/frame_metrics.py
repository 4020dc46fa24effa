"""Per-frame objective metrics and P.910 spatial/temporal information.

PSNR, SSIM, and MS-SSIM are computed on the luma plane only. SI/TI follow
P.910: SI is the spatial standard deviation of the Sobel-filtered luma,
TI the standard deviation of the luma difference between consecutive
frames. ``frame_metric_matrix`` combines the internally computed channels
with externally ingested VMAF-style channels into the fixed 11-channel
layout consumed by the feature pipeline.

All operations are pure; ``frame_metric_matrix`` accepts a worker count
and produces identical output for any value of it.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import signal

from .media import Frame, PixelFormat, VideoClip

__all__ = [
    "FrameMetricMatrix",
    "SiTiSummary",
    "DEFAULT_CHANNELS",
    "INTERNAL_CHANNELS",
    "PSNR_CAP_DB",
    "MS_SSIM_WEIGHTS",
    "psnr",
    "ssim",
    "ms_ssim",
    "spatial_information",
    "si_ti",
    "frame_metric_matrix",
    "load_external_metrics",
    "write_matrix_csv",
    "read_matrix_csv",
]

# Channel layout: the five internally computed channels followed by the six
# externally ingested VMAF-style channels. The order is part of the on-disk
# contract and must not change between runs.
INTERNAL_CHANNELS = ("psnr", "ssim", "ms_ssim", "si_ref", "ti_ref")
EXTERNAL_CHANNELS = ("vif_scale0", "vif_scale1", "vif_scale2", "vif_scale3", "adm2", "motion2")
DEFAULT_CHANNELS = INTERNAL_CHANNELS + EXTERNAL_CHANNELS

# +inf PSNR (identical frames) is capped when feeding the numeric pipeline;
# psnr() itself still reports the infinity sentinel.
PSNR_CAP_DB = 100.0

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)

_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
_SOBEL_Y = _SOBEL_X.T


@dataclass
class SiTiSummary:
    """Distribution summary of SI/TI series (95% percentile range style)."""

    si_mean: float
    si_std: float
    si_p2_5: float
    si_p97_5: float
    ti_mean: float
    ti_std: float
    ti_min: float
    ti_p2_5: float
    ti_p97_5: float


@dataclass
class FrameMetricMatrix:
    """N_frames x C matrix of per-frame metric values for one clip pair."""

    clip_id: str
    values: np.ndarray
    channel_names: tuple[str, ...]
    variant: str = "none"
    external_missing: bool = False

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.channel_names):
            raise ValueError(
                f"matrix shape {self.values.shape} does not match {len(self.channel_names)} channels"
            )
        if not np.isfinite(self.values).all():
            raise ValueError("frame metric matrix contains non-finite values")

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


def _luma(frame: Frame) -> np.ndarray:
    return np.asarray(frame.y, dtype=np.float64)


def _peak_value(frame: Frame) -> float:
    return 1023.0 if frame.y.dtype == PixelFormat.YUV420P10.dtype else 255.0


def _check_same_dims(ref: Frame, dist: Frame) -> None:
    if ref.y.shape != dist.y.shape:
        raise ValueError(f"frame dimension mismatch: {ref.y.shape} vs {dist.y.shape}")
    if ref.y.dtype != dist.y.dtype:
        raise ValueError(f"frame bit depth mismatch: {ref.y.dtype} vs {dist.y.dtype}")


def psnr(ref: Frame, dist: Frame, peak: float | None = None) -> float:
    """Luma PSNR in dB. Identical frames return +inf."""
    _check_same_dims(ref, dist)
    if peak is None:
        peak = _peak_value(ref)
    mse = float(np.mean((_luma(ref) - _luma(dist)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def _local_stats(x, y, kernel):
    # gaussian-weighted moments over fully interior windows
    conv = lambda img: signal.fftconvolve(img, kernel, mode="valid")
    mu_x = conv(x)
    mu_y = conv(y)
    var_x = conv(x * x) - mu_x * mu_x
    var_y = conv(y * y) - mu_y * mu_y
    cov = conv(x * y) - mu_x * mu_y
    return mu_x, mu_y, var_x, var_y, cov


def _ssim_maps(x, y, peak, window_size, sigma, k1, k2):
    kernel = _gaussian_kernel(window_size, sigma)
    mu_x, mu_y, var_x, var_y, cov = _local_stats(x, y, kernel)
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    luminance = (2.0 * mu_x * mu_y + c1) / (mu_x**2 + mu_y**2 + c1)
    contrast_structure = (2.0 * cov + c2) / (var_x + var_y + c2)
    return luminance, contrast_structure


def ssim(
    ref: Frame,
    dist: Frame,
    window_size: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
) -> float:
    """Mean local SSIM over the luma plane (11x11 Gaussian window, sigma 1.5)."""
    _check_same_dims(ref, dist)
    if min(ref.y.shape) < window_size:
        raise ValueError(f"frame {ref.y.shape} smaller than {window_size}x{window_size} window")
    peak = _peak_value(ref)
    luminance, cs = _ssim_maps(_luma(ref), _luma(dist), peak, window_size, sigma, k1, k2)
    return float(np.mean(luminance * cs))


def _downsample2(img: np.ndarray) -> np.ndarray:
    # 2x2 average pooling; odd trailing row/column is dropped first
    h, w = img.shape
    img = img[: h - h % 2, : w - w % 2]
    return (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2]) / 4.0


def ms_ssim(
    ref: Frame,
    dist: Frame,
    scales: int = 5,
    weights: tuple[float, ...] = MS_SSIM_WEIGHTS,
    window_size: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
) -> float:
    """Multi-scale SSIM on luma: contrast/structure at every scale, luminance at the coarsest."""
    _check_same_dims(ref, dist)
    if scales < 1 or len(weights) < scales:
        raise ValueError(f"need >= {scales} weights, got {len(weights)}")
    min_dim = window_size * 2 ** (scales - 1)
    if min(ref.y.shape) < min_dim:
        raise ValueError(f"frame {ref.y.shape} too small for {scales} scales (needs >= {min_dim} per side)")
    peak = _peak_value(ref)
    x, y = _luma(ref), _luma(dist)
    score = 1.0
    for level in range(scales):
        luminance, cs = _ssim_maps(x, y, peak, window_size, sigma, k1, k2)
        if level == scales - 1:
            score *= float(np.mean(luminance * cs)) ** weights[level]
        else:
            score *= float(np.mean(cs)) ** weights[level]
            x, y = _downsample2(x), _downsample2(y)
    return score


def _sobel_energy(luma: np.ndarray) -> np.ndarray:
    # replicate-edge padding so borders add no spurious gradient energy
    padded = np.pad(luma, 1, mode="edge")
    gx = signal.convolve2d(padded, _SOBEL_X, mode="valid")
    gy = signal.convolve2d(padded, _SOBEL_Y, mode="valid")
    return np.sqrt(gx * gx + gy * gy)


def spatial_information(clip: VideoClip) -> np.ndarray:
    """Per-frame SI: spatial stddev of the Sobel-filtered luma."""
    return np.array([float(np.std(_sobel_energy(_luma(f)))) for f in clip.frames])


def si_ti(clip: VideoClip) -> tuple[np.ndarray, np.ndarray, SiTiSummary]:
    """SI series (one per frame), TI series (one per frame from the second on), and summary.

    Clips with a single frame raise; use ``spatial_information`` for SI alone.
    """
    if clip.n_frames < 2:
        raise ValueError("TI needs >= 2 frames; spatial_information() computes SI alone")
    si = spatial_information(clip)
    lumas = [_luma(f) for f in clip.frames]
    ti = np.array([float(np.std(lumas[n] - lumas[n - 1])) for n in range(1, len(lumas))])
    summary = SiTiSummary(
        si_mean=float(np.mean(si)),
        si_std=float(np.std(si)),
        si_p2_5=float(np.percentile(si, 2.5)),
        si_p97_5=float(np.percentile(si, 97.5)),
        ti_mean=float(np.mean(ti)),
        ti_std=float(np.std(ti)),
        ti_min=float(np.min(ti)),
        ti_p2_5=float(np.percentile(ti, 2.5)),
        ti_p97_5=float(np.percentile(ti, 97.5)),
    )
    return si, ti, summary


def load_external_metrics(path: str) -> dict[str, np.ndarray]:
    """Read an external per-frame metric table (CSV: frame_index,<channel>,...)."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "frame_index" not in reader.fieldnames:
            raise ValueError(f"{path}: external table must have a frame_index column")
        rows = sorted(reader, key=lambda r: int(r["frame_index"]))
    channels = [name for name in rows[0].keys() if name != "frame_index"] if rows else []
    indices = [int(r["frame_index"]) for r in rows]
    if indices != list(range(len(rows))):
        raise ValueError(f"{path}: frame_index must cover 0..{len(rows) - 1} exactly once")
    return {name: np.array([float(r[name]) for r in rows]) for name in channels}


def _max_feasible_scales(shape: tuple[int, int], window_size: int = 11) -> int:
    feasible = int(math.floor(math.log2(min(shape) / window_size))) + 1
    return max(1, min(5, feasible))


def frame_metric_matrix(
    ref: VideoClip,
    dist: VideoClip,
    external: dict[str, np.ndarray] | None = None,
    clip_id: str = "",
    channels: tuple[str, ...] = DEFAULT_CHANNELS,
    variant: str = "none",
    workers: int = 1,
) -> FrameMetricMatrix:
    """Assemble the per-frame metric matrix (default 11 channels).

    Internal channels are computed here; any other requested channel is
    pulled from ``external`` (keyed by channel name, one value per frame).
    A missing external table yields zero-filled channels and sets the
    ``external_missing`` flag. The ms_ssim channel uses the largest scale
    count (at most 5) the frame size supports so small clips stay usable.
    """
    if ref.n_frames != dist.n_frames:
        raise ValueError(f"frame-count mismatch: ref {ref.n_frames} vs dist {dist.n_frames}")
    n = ref.n_frames
    wanted_internal = [c for c in channels if c in INTERNAL_CHANNELS]
    wanted_external = [c for c in channels if c not in INTERNAL_CHANNELS]

    columns: dict[str, np.ndarray] = {}
    if wanted_internal:
        scales = _max_feasible_scales((ref.height, ref.width))

        def per_frame(i: int) -> tuple[float, float, float]:
            rf, df = ref.frames[i], dist.frames[i]
            p = min(psnr(rf, df), PSNR_CAP_DB)
            s = ssim(rf, df) if "ssim" in wanted_internal else 0.0
            m = ms_ssim(rf, df, scales=scales) if "ms_ssim" in wanted_internal else 0.0
            return p, s, m

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                pair_rows = list(pool.map(per_frame, range(n)))
        else:
            pair_rows = [per_frame(i) for i in range(n)]
        columns["psnr"] = np.array([r[0] for r in pair_rows])
        columns["ssim"] = np.array([r[1] for r in pair_rows])
        columns["ms_ssim"] = np.array([r[2] for r in pair_rows])
        if "si_ref" in wanted_internal or "ti_ref" in wanted_internal:
            si = spatial_information(ref)
            lumas = [_luma(f) for f in ref.frames]
            # the first frame has no predecessor; its TI slot is zero
            ti = np.zeros(n)
            for i in range(1, n):
                ti[i] = float(np.std(lumas[i] - lumas[i - 1]))
            columns["si_ref"] = si
            columns["ti_ref"] = ti

    external_missing = False
    for name in wanted_external:
        if external is None:
            external_missing = True
            columns[name] = np.zeros(n)
        elif name in external:
            series = np.asarray(external[name], dtype=np.float64)
            if series.shape != (n,):
                raise ValueError(f"external channel {name} has {series.shape[0]} rows, clip has {n} frames")
            columns[name] = series
        else:
            raise ValueError(f"external table lacks requested channel {name!r}")

    values = np.column_stack([columns[c] for c in channels])
    return FrameMetricMatrix(
        clip_id=clip_id,
        values=values,
        channel_names=tuple(channels),
        variant=variant,
        external_missing=external_missing,
    )


def write_matrix_csv(matrix: FrameMetricMatrix, path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("frame_index",) + matrix.channel_names)
        for i, row in enumerate(matrix.values):
            writer.writerow([i] + [repr(float(v)) for v in row])


def read_matrix_csv(path: str, clip_id: str = "", variant: str = "none") -> FrameMetricMatrix:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "frame_index":
            raise ValueError(f"{path}: first column must be frame_index")
        rows = [[float(v) for v in row[1:]] for row in reader]
    return FrameMetricMatrix(
        clip_id=clip_id,
        values=np.array(rows, dtype=np.float64).reshape(len(rows), len(header) - 1),
        channel_names=tuple(header[1:]),
        variant=variant,
    )
