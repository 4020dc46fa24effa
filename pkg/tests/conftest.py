"""Shared builders for synthetic clips, votes, and feature data."""

from fractions import Fraction

import numpy as np
import pytest

from mlcvqa.media import Frame, PixelFormat, VideoClip
from mlcvqa.subjective import RatingRecord


def make_frame(luma, bit_depth=8):
    """Wrap a 2-D luma array into a Frame with mid-grey chroma."""
    luma = np.asarray(luma)
    dtype = np.uint8 if bit_depth == 8 else np.uint16
    h, w = luma.shape
    mid = 128 if bit_depth == 8 else 512
    chroma = np.full((h // 2, w // 2), mid, dtype=dtype)
    return Frame(luma.astype(dtype), chroma.copy(), chroma.copy())


def make_clip(lumas, fps=Fraction(30, 1), bit_depth=8):
    lumas = [np.asarray(l) for l in lumas]
    fmt = PixelFormat.YUV420P8 if bit_depth == 8 else PixelFormat.YUV420P10
    frames = [make_frame(l, bit_depth) for l in lumas]
    h, w = lumas[0].shape
    return VideoClip(width=w, height=h, frame_rate=fps, frames=frames, pixel_format=fmt)


def make_ratings(
    n_clips=30,
    n_codecs=27,
    votes_per_item=26,
    noise_sigma=1.0,
    clip_spread=1.0,
    seed=0,
):
    """Synthetic CLIC-shaped votes with a codec-dominant quality structure.

    Each codec has a base quality spread over the scale; clips perturb it by
    at most +-clip_spread/2; raters add Gaussian noise. Votes are rounded
    onto the 9-point scale. With noise_sigma=0 and clip_spread=0 every vote
    for a codec is identical, so all confidence intervals collapse to zero.
    """
    rng = np.random.default_rng(seed)
    codec_base = np.linspace(1.8, 8.2, n_codecs)
    codec_base = codec_base[rng.permutation(n_codecs)]
    clip_offset = rng.uniform(-clip_spread / 2.0, clip_spread / 2.0, size=n_clips)
    ratings = []
    for ci in range(n_clips):
        for mi in range(n_codecs):
            true_quality = float(np.clip(codec_base[mi] + clip_offset[ci], 1.0, 9.0))
            votes = rng.normal(true_quality, noise_sigma, size=votes_per_item)
            votes = np.clip(np.rint(votes), 1, 9).astype(int)
            for vi, v in enumerate(votes):
                ratings.append(
                    RatingRecord(f"clip{ci:02d}", f"codec{mi:02d}", f"rater{vi:03d}", int(v))
                )
    return ratings


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
