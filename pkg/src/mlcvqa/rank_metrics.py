"""Rank and accuracy metrics: PCC, SRCC, Kendall tau-b, Tau-b 95, RMSE.

Tau-b 95 is tau-b evaluated against a subjective ranking in which two
items form a tied rank whenever the DMOS of one falls inside the 95%
confidence interval of the other. Undefined correlations (constant or
all-tied input) are reported as NaN, never silently coerced to 0.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .subjective import ClipScore, ModelScore

__all__ = [
    "RankedList",
    "MetricReport",
    "SignificanceResult",
    "EvaluationResult",
    "pcc",
    "srcc",
    "tau_b",
    "rmse",
    "ci_tie_ranking",
    "tau_b_95",
    "evaluate",
    "average_reports",
    "paired_significance",
    "read_predictions_csv",
    "write_predictions_csv",
]

METRIC_NAMES = ("pcc", "srcc", "tau_b", "tau_b_95", "rmse")


@dataclass
class RankedList:
    """Items with tie-averaged ranks (1 = best); sum of ranks is n(n+1)/2."""

    items: list[tuple[object, float]]

    @property
    def ranks(self) -> np.ndarray:
        return np.array([rank for _, rank in self.items])


@dataclass
class MetricReport:
    level: str
    pcc: float
    srcc: float
    tau_b: float
    tau_b_95: float
    rmse: float
    n_items: int

    def as_dict(self) -> dict:
        return {
            "level": self.level,
            "pcc": self.pcc,
            "srcc": self.srcc,
            "tau_b": self.tau_b,
            "tau_b_95": self.tau_b_95,
            "rmse": self.rmse,
            "n_items": self.n_items,
        }


@dataclass
class SignificanceResult:
    p_value: float
    significant_95: bool
    significant_90: bool
    mean_diff: float
    reps: int


@dataclass
class EvaluationResult:
    clip_report: MetricReport
    model_report: MetricReport
    per_fold: list[tuple[MetricReport, MetricReport]] = field(default_factory=list)


def _as_arrays(a, b) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"inputs must be equal-length vectors, got {x.shape} and {y.shape}")
    if len(x) < 2:
        raise ValueError("need at least 2 points")
    return x, y


def pcc(a, b) -> float:
    """Sample Pearson correlation; NaN for constant input."""
    x, y = _as_arrays(a, b)
    dx = x - x.mean()
    dy = y - y.mean()
    denom = math.sqrt(float(dx @ dx) * float(dy @ dy))
    if denom == 0.0:
        return math.nan
    return float(dx @ dy) / denom


def srcc(a, b) -> float:
    """Spearman rank correlation: Pearson over tie-averaged ranks."""
    x, y = _as_arrays(a, b)
    return pcc(rankdata(x, method="average"), rankdata(y, method="average"))


def tau_b(a, b) -> float:
    """Kendall tau-b with tie correction.

    (C - D) / sqrt((C + D + Ta)(C + D + Tb)) over all item pairs, where Ta
    and Tb count pairs tied only in a and only in b. NaN when either side
    is entirely tied. Pair classification runs in blocks so large inputs
    stay within memory.
    """
    x, y = _as_arrays(a, b)
    n = len(x)
    concordant = discordant = tied_x_only = tied_y_only = 0
    block = 512
    for start in range(0, n, block):
        sx = np.sign(x[start : start + block, None] - x[None, :])
        sy = np.sign(y[start : start + block, None] - y[None, :])
        prod = sx * sy
        concordant += int(np.count_nonzero(prod > 0))
        discordant += int(np.count_nonzero(prod < 0))
        tied_x_only += int(np.count_nonzero((sx == 0) & (sy != 0)))
        tied_y_only += int(np.count_nonzero((sx != 0) & (sy == 0)))
    # every unordered pair was seen twice (and i == j pairs are all-tied)
    concordant //= 2
    discordant //= 2
    tied_x_only //= 2
    tied_y_only //= 2
    denom_x = concordant + discordant + tied_x_only
    denom_y = concordant + discordant + tied_y_only
    if denom_x == 0 or denom_y == 0:
        return math.nan
    return (concordant - discordant) / math.sqrt(denom_x * denom_y)


def rmse(a, b) -> float:
    x, y = _as_arrays(a, b)
    return float(np.sqrt(np.mean((x - y) ** 2)))


def _score_item_id(score) -> object:
    if isinstance(score, ClipScore):
        return (score.clip_id, score.codec_id)
    if isinstance(score, ModelScore):
        return score.codec_id
    raise TypeError(f"expected ClipScore or ModelScore, got {type(score).__name__}")


def ci_tie_ranking(scores: Sequence) -> RankedList:
    """Rank items by DMOS (descending) with CI-overlap tie groups.

    Walking the DMOS-sorted list, an item joins the current group when its
    DMOS lies within the group anchor's 95% CI or vice versa; the anchor is
    the group's first (highest-DMOS) element. Groups get average ranks.
    """
    decorated = sorted(
        ((s.dmos, s.ci95_half_width, _score_item_id(s)) for s in scores),
        key=lambda t: (-t[0], str(t[2])),
    )
    groups: list[list[tuple[float, float, object]]] = []
    for entry in decorated:
        if groups:
            anchor_dmos, anchor_ci, _ = groups[-1][0]
            dmos, ci, _ = entry
            if abs(dmos - anchor_dmos) <= anchor_ci or abs(anchor_dmos - dmos) <= ci:
                groups[-1].append(entry)
                continue
        groups.append([entry])
    items: list[tuple[object, float]] = []
    position = 1
    for group in groups:
        avg_rank = position + (len(group) - 1) / 2.0
        for _, _, item_id in group:
            items.append((item_id, avg_rank))
        position += len(group)
    return RankedList(items=items)


def tau_b_95(subjective: Sequence, predictions: Sequence[tuple[object, float]]) -> float:
    """Kendall tau-b between the CI-tied subjective ranking and prediction ranks."""
    ranked = ci_tie_ranking(subjective)
    subj_ranks = {item_id: rank for item_id, rank in ranked.items}
    pred_map = dict(predictions)
    if set(pred_map) != set(subj_ranks):
        missing = sorted(map(str, set(subj_ranks) - set(pred_map)))
        extra = sorted(map(str, set(pred_map) - set(subj_ranks)))
        raise ValueError(f"item-set mismatch: missing {missing}, extra {extra}")
    order = sorted(subj_ranks, key=str)
    subj = np.array([subj_ranks[i] for i in order])
    pred_scores = np.array([pred_map[i] for i in order], dtype=np.float64)
    # higher score -> better rank (1); ranks on both sides, ties averaged
    pred = rankdata(-pred_scores, method="average")
    # subjective ranks ascend as quality drops, so agreement gives tau = +1
    return tau_b(subj, pred)


def _level_metrics(
    subjective: Sequence,
    predictions: dict[object, float],
    level: str,
) -> MetricReport:
    subj_by_id = {_score_item_id(s): s for s in subjective}
    if set(predictions) != set(subj_by_id):
        missing = sorted(map(str, set(subj_by_id) - set(predictions)))
        extra = sorted(map(str, set(predictions) - set(subj_by_id)))
        raise ValueError(f"{level}-level coverage gap: missing {missing}, extra {extra}")
    order = sorted(subj_by_id, key=str)
    dmos = np.array([subj_by_id[i].dmos for i in order])
    pred = np.array([predictions[i] for i in order])
    return MetricReport(
        level=level,
        pcc=pcc(dmos, pred),
        srcc=srcc(dmos, pred),
        tau_b=tau_b(dmos, pred),
        tau_b_95=tau_b_95([subj_by_id[i] for i in order], [(i, predictions[i]) for i in order]),
        rmse=rmse(dmos, pred),
        n_items=len(order),
    )


def evaluate(
    predictions: dict[tuple[str, str], float],
    clip_scores: Sequence[ClipScore],
    folds: Sequence[Sequence[str]] | None = None,
) -> EvaluationResult:
    """Clip- and model-level reports for predictions keyed by (clip_id, codec_id).

    With ``folds`` (lists of test-set clip_ids), per-fold reports are
    computed on each fold's restriction and the headline reports are the
    across-fold averages; otherwise everything is evaluated in one pass.
    """
    from .subjective import aggregate_model  # local import to avoid cycle at module load

    def one_pass(scores: Sequence[ClipScore]) -> tuple[MetricReport, MetricReport]:
        wanted = {(cs.clip_id, cs.codec_id): cs for cs in scores}
        preds = {key: predictions[key] for key in wanted if key in predictions}
        if len(preds) != len(wanted):
            missing = sorted(str(k) for k in set(wanted) - set(preds))
            raise ValueError(f"predictions missing for {missing}")
        clip_report = _level_metrics(list(scores), preds, "clip")

        by_codec: dict[str, list[ClipScore]] = {}
        for cs in scores:
            by_codec.setdefault(cs.codec_id, []).append(cs)
        all_clips = {cs.clip_id for cs in scores}
        model_subj = [aggregate_model(by_codec[c], expected_clips=all_clips) for c in sorted(by_codec)]
        model_preds = {
            codec: float(np.mean([preds[(cs.clip_id, cs.codec_id)] for cs in by_codec[codec]]))
            for codec in by_codec
        }
        model_report = _level_metrics(model_subj, model_preds, "model")
        return clip_report, model_report

    if folds is None:
        clip_report, model_report = one_pass(list(clip_scores))
        return EvaluationResult(clip_report, model_report)

    per_fold = []
    for fold_clips in folds:
        fold_set = set(fold_clips)
        subset = [cs for cs in clip_scores if cs.clip_id in fold_set]
        if not subset:
            raise ValueError(f"fold {sorted(fold_set)} matches no clip scores")
        per_fold.append(one_pass(subset))
    clip_avg = average_reports([c for c, _ in per_fold])
    model_avg = average_reports([m for _, m in per_fold])
    return EvaluationResult(clip_avg, model_avg, per_fold=per_fold)


def average_reports(reports: Sequence[MetricReport]) -> MetricReport:
    """Direct (unweighted) across-fold average of each metric."""
    if not reports:
        raise ValueError("no reports to average")
    level = reports[0].level
    return MetricReport(
        level=level,
        pcc=float(np.mean([r.pcc for r in reports])),
        srcc=float(np.mean([r.srcc for r in reports])),
        tau_b=float(np.mean([r.tau_b for r in reports])),
        tau_b_95=float(np.mean([r.tau_b_95 for r in reports])),
        rmse=float(np.mean([r.rmse for r in reports])),
        n_items=sum(r.n_items for r in reports),
    )


def paired_significance(
    errors_a,
    errors_b,
    reps: int = 1000,
    seed: int = 0,
) -> SignificanceResult:
    """Paired bootstrap over items of the mean absolute-error difference.

    Two-sided p-value with the add-one correction; deterministic given the
    seed regardless of how repetitions are scheduled.
    """
    x, y = _as_arrays(errors_a, errors_b)
    if len(x) < 5:
        raise ValueError("need >= 5 paired errors")
    if reps < 1000:
        raise ValueError("need >= 1000 bootstrap repetitions")
    diffs = x - y
    n = len(diffs)
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(reps)]
    replicate_means = np.empty(reps)
    for i, rng in enumerate(rngs):
        replicate_means[i] = float(np.mean(diffs[rng.integers(0, n, size=n)]))
    n_le = int(np.count_nonzero(replicate_means <= 0.0))
    n_ge = int(np.count_nonzero(replicate_means >= 0.0))
    p = min(1.0, 2.0 * (min(n_le, n_ge) + 1) / (reps + 1))
    return SignificanceResult(
        p_value=p,
        significant_95=p < 0.05,
        significant_90=p < 0.10,
        mean_diff=float(np.mean(diffs)),
        reps=reps,
    )


def read_predictions_csv(path: str) -> dict[tuple[str, str], float]:
    """Read per-clip predictions (header: clip_id,codec_id,score)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"clip_id", "codec_id", "score"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ValueError(f"{path}: predictions CSV needs columns {sorted(required)}")
        out: dict[tuple[str, str], float] = {}
        for row in reader:
            key = (row["clip_id"], row["codec_id"])
            if key in out:
                raise ValueError(f"{path}: duplicate prediction for {key}")
            out[key] = float(row["score"])
        return out


def write_predictions_csv(predictions: dict[tuple[str, str], float], path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(("clip_id", "codec_id", "score"))
        for (clip_id, codec_id), score in sorted(predictions.items()):
            writer.writerow((clip_id, codec_id, repr(float(score))))
