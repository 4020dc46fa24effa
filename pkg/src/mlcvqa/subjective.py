"""Subjective vote ingestion and DMOS aggregation.

Votes arrive on the 9-point DCR scale, one row per rater. Aggregation
produces the arithmetic-mean DMOS plus a Student-t 95% confidence
half-width, at clip (clip x codec) and codec ("model") level. The model
level averages per-clip DMOS values and takes the t-interval across them.
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np
from scipy import stats

__all__ = [
    "SCORE_MIN",
    "SCORE_MAX",
    "RatingRecord",
    "ClipScore",
    "ModelScore",
    "aggregate_clip",
    "aggregate_model",
    "aggregate_ratings",
    "rescale_linear",
    "fit_linear_rescale",
    "read_ratings_csv",
    "write_ratings_csv",
    "write_clip_scores_csv",
    "read_clip_scores_csv",
]

SCORE_MIN = 1
SCORE_MAX = 9


@dataclass(frozen=True)
class RatingRecord:
    """One raw vote: a rater's score for one encoded clip."""

    clip_id: str
    codec_id: str
    rater_id: str
    score: int

    def __post_init__(self) -> None:
        if not SCORE_MIN <= self.score <= SCORE_MAX:
            raise ValueError(f"score {self.score} outside [{SCORE_MIN}, {SCORE_MAX}]")


@dataclass(frozen=True)
class ClipScore:
    clip_id: str
    codec_id: str
    dmos: float
    ci95_half_width: float
    n_votes: int


@dataclass(frozen=True)
class ModelScore:
    codec_id: str
    dmos: float
    ci95_half_width: float
    n_votes: int


def _t_interval(values: np.ndarray) -> float:
    """95% CI half-width of the sample mean: t_{0.975,n-1} * s / sqrt(n)."""
    n = len(values)
    if n < 2:
        return 0.0
    s = float(np.std(values, ddof=1))
    if s == 0.0:
        return 0.0
    return float(stats.t.ppf(0.975, n - 1)) * s / math.sqrt(n)


def aggregate_clip(votes: list[RatingRecord]) -> ClipScore:
    """DMOS and 95% CI for one (clip, codec) group of votes."""
    if not votes:
        raise ValueError("empty vote list")
    keys = {(v.clip_id, v.codec_id) for v in votes}
    if len(keys) != 1:
        raise ValueError(f"votes span multiple (clip, codec) groups: {sorted(keys)}")
    scores = np.array([v.score for v in votes], dtype=np.float64)
    return ClipScore(
        clip_id=votes[0].clip_id,
        codec_id=votes[0].codec_id,
        dmos=float(np.mean(scores)),
        ci95_half_width=_t_interval(scores),
        n_votes=len(votes),
    )


def aggregate_model(clip_scores: list[ClipScore], expected_clips: set[str] | None = None) -> ModelScore:
    """Codec-level DMOS: mean of per-clip DMOS, CI across the per-clip means.

    Every codec must cover the full clip set; pass ``expected_clips`` to
    enforce coverage (the caller knows the test-set universe).
    """
    if not clip_scores:
        raise ValueError("empty clip-score list")
    codecs = {cs.codec_id for cs in clip_scores}
    if len(codecs) != 1:
        raise ValueError(f"clip scores span multiple codecs: {sorted(codecs)}")
    clips = [cs.clip_id for cs in clip_scores]
    if len(set(clips)) != len(clips):
        raise ValueError("duplicate clip in model aggregation")
    if expected_clips is not None and set(clips) != set(expected_clips):
        missing = sorted(set(expected_clips) - set(clips))
        extra = sorted(set(clips) - set(expected_clips))
        raise ValueError(f"codec {clip_scores[0].codec_id!r} coverage gap: missing {missing}, extra {extra}")
    dmos_values = np.array([cs.dmos for cs in clip_scores], dtype=np.float64)
    return ModelScore(
        codec_id=clip_scores[0].codec_id,
        dmos=float(np.mean(dmos_values)),
        ci95_half_width=_t_interval(dmos_values),
        n_votes=sum(cs.n_votes for cs in clip_scores),
    )


def aggregate_ratings(
    ratings: list[RatingRecord],
) -> tuple[list[ClipScore], list[ModelScore]]:
    """Group raw votes into sorted ClipScores and ModelScores.

    Raises when any codec was rated on a strict subset of the clips.
    """
    groups: dict[tuple[str, str], list[RatingRecord]] = defaultdict(list)
    for vote in ratings:
        groups[(vote.clip_id, vote.codec_id)].append(vote)
    clip_scores = [aggregate_clip(groups[key]) for key in sorted(groups)]

    by_codec: dict[str, list[ClipScore]] = defaultdict(list)
    for cs in clip_scores:
        by_codec[cs.codec_id].append(cs)
    all_clips = {cs.clip_id for cs in clip_scores}
    model_scores = [
        aggregate_model(by_codec[codec], expected_clips=all_clips) for codec in sorted(by_codec)
    ]
    return clip_scores, model_scores


def rescale_linear(values, lo: float = 1.0, hi: float = 9.0) -> list[float]:
    """Affine map sending observed min -> lo and max -> hi (order preserving)."""
    arr = np.asarray(values, dtype=np.float64)
    vmin, vmax = float(arr.min()), float(arr.max())
    if vmax == vmin:
        raise ValueError("constant input cannot be min-max rescaled")
    return list((arr - vmin) * ((hi - lo) / (vmax - vmin)) + lo)


def fit_linear_rescale(values, targets) -> list[float]:
    """Least-squares affine fit of values onto targets (optional alternative
    to min-max rescaling when predictions should sit on the DMOS scale)."""
    x = np.asarray(values, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("values and targets must have equal length")
    a, b = np.polyfit(x, y, 1)
    return list(a * x + b)


def read_ratings_csv(path: str) -> list[RatingRecord]:
    """Read raw votes (header: clip_id,codec_id,rater_id,score)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"clip_id", "codec_id", "rater_id", "score"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ValueError(f"{path}: ratings CSV needs columns {sorted(required)}")
        return [
            RatingRecord(row["clip_id"], row["codec_id"], row["rater_id"], int(row["score"]))
            for row in reader
        ]


def write_ratings_csv(ratings: list[RatingRecord], path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(("clip_id", "codec_id", "rater_id", "score"))
        for r in ratings:
            writer.writerow((r.clip_id, r.codec_id, r.rater_id, r.score))


def write_clip_scores_csv(scores: list[ClipScore], path: str) -> None:
    """Emit aggregates (header: clip_id,codec_id,dmos,ci95,n)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(("clip_id", "codec_id", "dmos", "ci95", "n"))
        for s in scores:
            writer.writerow((s.clip_id, s.codec_id, repr(s.dmos), repr(s.ci95_half_width), s.n_votes))


def read_clip_scores_csv(path: str) -> list[ClipScore]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return [
            ClipScore(
                clip_id=row["clip_id"],
                codec_id=row["codec_id"],
                dmos=float(row["dmos"]),
                ci95_half_width=float(row["ci95"]),
                n_votes=int(row["n"]),
            )
            for row in reader
        ]
