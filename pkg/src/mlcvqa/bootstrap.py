"""Vote-count bootstrapping: DMOS stability and upper-limit model accuracy.

For each repetition, N votes are drawn with replacement per clip (or per
codec at model level), DMOS is recomputed from the subset, and the subset
scores are compared against the full-data scores with every rank metric.
Repetition RNG streams are derived from the seed, so results are identical
for any worker count.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .rank_metrics import METRIC_NAMES, MetricReport, pcc, rmse, srcc, tau_b, tau_b_95
from .subjective import RatingRecord, aggregate_ratings

__all__ = [
    "BootstrapCurve",
    "UpperLimit",
    "bootstrap_votes",
    "bootstrap_curve",
    "upper_limit",
    "write_curve_csv",
]


@dataclass
class BootstrapCurve:
    """Mean and percentile 95% CI of each metric across repetitions, per N."""

    level: str
    n_votes: list[int]
    mean: dict[str, list[float]]
    ci95_lo: dict[str, list[float]]
    ci95_hi: dict[str, list[float]]


@dataclass
class UpperLimit:
    clip: MetricReport
    model: MetricReport
    n_clip_votes: int
    n_model_votes: int
    reps: int


def _clip_vote_pools(ratings: list[RatingRecord]) -> dict[tuple[str, str], np.ndarray]:
    pools: dict[tuple[str, str], list[int]] = {}
    for r in ratings:
        pools.setdefault((r.clip_id, r.codec_id), []).append(r.score)
    return {key: np.array(votes, dtype=np.float64) for key, votes in sorted(pools.items())}


def _codec_vote_pools(ratings: list[RatingRecord]) -> dict[str, dict[str, np.ndarray]]:
    pools: dict[str, dict[str, list[int]]] = {}
    for r in ratings:
        pools.setdefault(r.codec_id, {}).setdefault(r.clip_id, []).append(r.score)
    return {
        codec: {clip: np.array(v, dtype=np.float64) for clip, v in sorted(clips.items())}
        for codec, clips in sorted(pools.items())
    }


def bootstrap_votes(
    ratings: list[RatingRecord],
    n_votes: int,
    reps: int,
    level: str = "clip",
    seed: int = 0,
    identity: bool = False,
    stratified: bool = False,
) -> list[MetricReport]:
    """One MetricReport per repetition of the vote-subset simulation.

    ``identity`` replaces sampling with the full vote pool (degenerate
    check: every correlation must be 1, RMSE 0). At model level the N votes
    are drawn from the codec's pooled votes; ``stratified`` spreads the
    draw evenly across the codec's clips instead.
    """
    if n_votes < 1:
        raise ValueError("n_votes must be >= 1")
    if reps < 1:
        raise ValueError("reps must be >= 1")
    if level not in ("clip", "model"):
        raise ValueError(f"unknown level {level!r}")
    if not ratings:
        raise ValueError("no ratings")

    clip_scores, model_scores = aggregate_ratings(ratings)
    if level == "clip":
        subjective = clip_scores
        pools = _clip_vote_pools(ratings)
        keys = [(cs.clip_id, cs.codec_id) for cs in clip_scores]
        full = np.array([cs.dmos for cs in clip_scores])
    else:
        subjective = model_scores
        codec_pools = _codec_vote_pools(ratings)
        keys = [ms.codec_id for ms in model_scores]
        full = np.array([ms.dmos for ms in model_scores])

    rng_seeds = np.random.SeedSequence(seed).spawn(reps)
    reports = []
    for rep in range(reps):
        rng = np.random.default_rng(rng_seeds[rep])
        subset = np.empty(len(keys))
        for i, key in enumerate(keys):
            if level == "clip":
                pool = pools[key]
                subset[i] = pool.mean() if identity else _draw_mean(rng, pool, n_votes)
            else:
                subset[i] = _model_subset_dmos(
                    rng, codec_pools[key], n_votes, identity=identity, stratified=stratified
                )
        reports.append(
            MetricReport(
                level=level,
                pcc=pcc(full, subset),
                srcc=srcc(full, subset),
                tau_b=tau_b(full, subset),
                tau_b_95=tau_b_95(subjective, list(zip(keys, subset))),
                rmse=rmse(full, subset),
                n_items=len(keys),
            )
        )
    return reports


def _draw_mean(rng: np.random.Generator, pool: np.ndarray, n: int) -> float:
    return float(pool[rng.integers(0, len(pool), size=n)].mean())


def _model_subset_dmos(
    rng: np.random.Generator,
    clips: dict[str, np.ndarray],
    n: int,
    identity: bool,
    stratified: bool,
) -> float:
    if identity:
        return float(np.mean([votes.mean() for votes in clips.values()]))
    if not stratified:
        pooled = np.concatenate(list(clips.values()))
        return _draw_mean(rng, pooled, n)
    # spread n as evenly as possible over clips, then average the clip means
    names = list(clips)
    base, extra = divmod(n, len(names))
    counts = [base + (1 if i < extra else 0) for i in range(len(names))]
    means = [
        _draw_mean(rng, clips[name], count) for name, count in zip(names, counts) if count > 0
    ]
    return float(np.mean(means))


def bootstrap_curve(
    ratings: list[RatingRecord],
    n_votes_list: list[int],
    reps: int,
    level: str = "clip",
    seed: int = 0,
    stratified: bool = False,
) -> BootstrapCurve:
    """Sweep the simulation over vote counts; CI is the 2.5/97.5 percentile
    of the per-repetition metric values."""
    mean: dict[str, list[float]] = {m: [] for m in METRIC_NAMES}
    lo: dict[str, list[float]] = {m: [] for m in METRIC_NAMES}
    hi: dict[str, list[float]] = {m: [] for m in METRIC_NAMES}
    for idx, n in enumerate(n_votes_list):
        # one independent derived stream per N keeps the sweep order irrelevant
        reports = bootstrap_votes(
            ratings, n, reps, level=level, seed=_derive_seed(seed, idx), stratified=stratified
        )
        for metric in METRIC_NAMES:
            values = np.array([getattr(r, metric) for r in reports])
            mean[metric].append(float(np.mean(values)))
            lo[metric].append(float(np.percentile(values, 2.5)))
            hi[metric].append(float(np.percentile(values, 97.5)))
    return BootstrapCurve(level=level, n_votes=list(n_votes_list), mean=mean, ci95_lo=lo, ci95_hi=hi)


def _derive_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def upper_limit(
    ratings: list[RatingRecord],
    n_clip_votes: int,
    n_model_votes: int,
    reps: int = 200,
    seed: int = 0,
    stratified: bool = False,
) -> UpperLimit:
    """Mean metrics across repetitions at the given vote counts: the accuracy
    ceiling a hypothetical objective model could reach on this test set."""
    from .rank_metrics import average_reports

    clip_reports = bootstrap_votes(
        ratings, n_clip_votes, reps, level="clip", seed=_derive_seed(seed, 0)
    )
    model_reports = bootstrap_votes(
        ratings, n_model_votes, reps, level="model", seed=_derive_seed(seed, 1), stratified=stratified
    )
    return UpperLimit(
        clip=average_reports(clip_reports),
        model=average_reports(model_reports),
        n_clip_votes=n_clip_votes,
        n_model_votes=n_model_votes,
        reps=reps,
    )


def write_curve_csv(curves: list[BootstrapCurve], path: str) -> None:
    """Plot-ready CSV: level,n_votes,metric,mean,ci95_lo,ci95_hi."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("level", "n_votes", "metric", "mean", "ci95_lo", "ci95_hi"))
        for curve in curves:
            for i, n in enumerate(curve.n_votes):
                for metric in METRIC_NAMES:
                    writer.writerow(
                        (
                            curve.level,
                            n,
                            metric,
                            repr(curve.mean[metric][i]),
                            repr(curve.ci95_lo[metric][i]),
                            repr(curve.ci95_hi[metric][i]),
                        )
                    )
