"""Optimization loop, learning-rate schedule, and 5-fold cross-validation.

Adam with decoupled weight decay drives the quality model through a linear
warmup followed by cosine decay. Cross-validation splits by source video so
no video's encodes appear on both sides of a fold. Training is fully
deterministic given the config seed and model init seed.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .features import FeatureSequence, temporal_subsample
from .model import ModelConfig, QualityModel, batch_backward, forward, init_model
from .rank_metrics import EvaluationResult, MetricReport, average_reports, evaluate
from .subjective import ClipScore, RatingRecord, aggregate_ratings

__all__ = [
    "TrainConfig",
    "FoldSplit",
    "TrainItem",
    "TrainResult",
    "TrainingDiverged",
    "make_folds",
    "lr_schedule",
    "AdamState",
    "adam_step",
    "train",
    "crossval",
    "write_history_csv",
]


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_lr: float = 4e-4
    warmup_epochs: int = 10
    epochs_after_warmup: int = 200
    seed: int = 0
    shuffle: bool = True
    temporal_subsample: bool = False
    use_augmented_variants: bool = False

    def __post_init__(self) -> None:
        if min(self.batch_size, self.warmup_epochs, self.epochs_after_warmup) < 1:
            raise ValueError("batch_size and epoch counts must be positive")
        if min(self.beta1, self.beta2, self.eps) <= 0 or self.weight_decay < 0 or self.max_lr < 0:
            raise ValueError("optimizer hyperparameters must be positive")

    @property
    def total_epochs(self) -> int:
        return self.warmup_epochs + self.epochs_after_warmup


@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    train_video_ids: frozenset[str]
    test_video_ids: frozenset[str]


@dataclass
class TrainItem:
    """One training unit: all feature variants of a clip pair plus its DMOS."""

    variants: dict[str, FeatureSequence]
    dmos: float


@dataclass
class TrainResult:
    model: QualityModel
    history: list[dict]


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; carries diagnostics."""

    def __init__(self, epoch: int, batch: int, param_norms: dict[str, float]):
        self.epoch = epoch
        self.batch = batch
        self.param_norms = param_norms
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}; param norms: {param_norms}")


def make_folds(video_ids: Sequence[str], k: int = 5, seed: int = 0) -> list[FoldSplit]:
    """Deterministic shuffle-then-partition; near-equal test sets."""
    ids = sorted(set(video_ids))
    if k > len(ids):
        raise ValueError(f"k={k} exceeds {len(ids)} videos")
    order = list(np.array(ids, dtype=object)[np.random.default_rng(seed).permutation(len(ids))])
    base, extra = divmod(len(order), k)
    folds = []
    start = 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        test = frozenset(order[start : start + size])
        folds.append(FoldSplit(i, frozenset(ids) - test, test))
        start += size
    return folds


def lr_schedule(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup to max_lr, then cosine decay to 0 over the remaining steps."""
    if step < 0:
        raise ValueError("step must be >= 0")
    warmup_steps = cfg.warmup_epochs * steps_per_epoch
    if step < warmup_steps:
        return cfg.max_lr * (step + 1) / warmup_steps
    decay_steps = cfg.epochs_after_warmup * steps_per_epoch
    progress = (step - warmup_steps) / max(decay_steps - 1, 1)
    progress = min(progress, 1.0)
    return cfg.max_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    t: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def for_model(cls, model: QualityModel) -> "AdamState":
        return cls(
            t=0,
            m={name: np.zeros_like(p) for name, p in model.named_params()},
            v={name: np.zeros_like(p) for name, p in model.named_params()},
        )


def adam_step(model: QualityModel, grads: QualityModel, state: AdamState, lr: float, cfg: TrainConfig) -> None:
    """In-place Adam update with decoupled weight decay (lr * wd * theta)."""
    state.t += 1
    bc1 = 1.0 - cfg.beta1**state.t
    bc2 = 1.0 - cfg.beta2**state.t
    grad_map = dict(grads.named_params())
    for name, param in model.named_params():
        g = grad_map[name]
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        if cfg.weight_decay > 0.0:
            update = update + cfg.weight_decay * param
        param -= lr * update


def _normalize_dataset(dataset) -> list[TrainItem]:
    items = []
    for entry in dataset:
        if isinstance(entry, TrainItem):
            items.append(entry)
        else:
            seq, dmos = entry
            items.append(TrainItem(variants={seq.variant: seq}, dmos=float(dmos)))
    if not items:
        raise ValueError("empty dataset")
    dims = {seq.D for item in items for seq in item.variants.values()}
    if len(dims) != 1:
        raise ValueError(f"all feature sequences must share D, got {sorted(dims)}")
    return items


def _epoch_samples(items: list[TrainItem], cfg: TrainConfig, rng: np.random.Generator):
    """Materialize one epoch: one random variant per pair, optionally split
    into its two temporal-subsample halves (each counts as a sample)."""
    samples: list[tuple[FeatureSequence, float]] = []
    for item in items:
        names = sorted(item.variants)
        if cfg.use_augmented_variants and len(names) > 1:
            name = names[int(rng.integers(0, len(names)))]
        else:
            name = names[0] if "none" not in item.variants else "none"
        seq = item.variants[name]
        if cfg.temporal_subsample and seq.T >= 2:
            even, odd = temporal_subsample(seq)
            samples.append((even, item.dmos))
            samples.append((odd, item.dmos))
        else:
            samples.append((seq, item.dmos))
    return samples


def _param_norms(model: QualityModel) -> dict[str, float]:
    return {name: float(np.linalg.norm(p)) for name, p in model.named_params()}


def train(
    dataset,
    cfg: TrainConfig,
    model_init_seed: int = 0,
    model_config: ModelConfig | None = None,
    val_dataset: Sequence[tuple[FeatureSequence, float]] | None = None,
) -> TrainResult:
    """Run the full warmup + cosine schedule over (features, DMOS) pairs.

    ``dataset`` is a list of (FeatureSequence, dmos) tuples or TrainItems.
    History rows carry epoch, mean train loss, validation RMSE (NaN without
    a validation set), and the last learning rate of the epoch.
    """
    items = _normalize_dataset(dataset)
    input_dim = next(iter(items[0].variants.values())).D
    if model_config is None:
        model_config = ModelConfig(input_dim=input_dim)
    elif model_config.input_dim != input_dim:
        raise ValueError(f"model expects {model_config.input_dim}-D input, data is {input_dim}-D")

    model = init_model(model_config, seed=model_init_seed)
    state = AdamState.for_model(model)
    rng = np.random.default_rng(cfg.seed)
    # per-epoch sample count is variant-independent, so the schedule is too
    n_samples = sum(
        2 if cfg.temporal_subsample and next(iter(item.variants.values())).T >= 2 else 1
        for item in items
    )
    steps_per_epoch = math.ceil(n_samples / cfg.batch_size)

    history = []
    global_step = 0
    for epoch in range(cfg.total_epochs):
        samples = _epoch_samples(items, cfg, rng)
        order = rng.permutation(len(samples)) if cfg.shuffle else np.arange(len(samples))
        epoch_losses = []
        lr = 0.0
        for batch_index, start in enumerate(range(0, len(samples), cfg.batch_size)):
            batch = [samples[i] for i in order[start : start + cfg.batch_size]]
            lr = lr_schedule(global_step, steps_per_epoch, cfg)
            batch_loss, grads = batch_backward(
                model, [seq for seq, _ in batch], [dmos for _, dmos in batch]
            )
            if not math.isfinite(batch_loss):
                raise TrainingDiverged(epoch, batch_index, _param_norms(model))
            adam_step(model, grads, state, lr, cfg)
            epoch_losses.append(batch_loss)
            global_step += 1
        row = {
            "epoch": epoch,
            "train_loss": float(np.mean(epoch_losses)),
            "val_rmse": math.nan,
            "lr": lr,
        }
        if val_dataset is not None:
            errs = [forward(model, seq).score - dmos for seq, dmos in val_dataset]
            row["val_rmse"] = float(np.sqrt(np.mean(np.square(errs))))
        history.append(row)
    return TrainResult(model=model, history=history)


@dataclass
class ManifestEntry:
    """One feature file in a training manifest."""

    clip_id: str
    codec_id: str
    variant: str
    dmos: float
    feature_path: str = ""
    features: FeatureSequence | None = None

    def load(self) -> FeatureSequence:
        if self.features is not None:
            return self.features
        from .features import read_features

        return read_features(self.feature_path)


@dataclass
class CrossvalResult:
    folds: list[FoldSplit]
    per_fold: list[EvaluationResult]
    clip_row: MetricReport
    model_row: MetricReport


def crossval(
    entries: Sequence[ManifestEntry],
    ratings: Sequence[RatingRecord],
    cfg: TrainConfig,
    k: int = 5,
    model_config: ModelConfig | None = None,
    model_init_seed: int = 0,
    test_variant: str = "none",
    predictor: Callable[[Sequence[ManifestEntry]], dict[tuple[str, str], float]] | None = None,
) -> CrossvalResult:
    """K-fold cross-validation by source video with an averaged summary row.

    Each fold trains on the remaining videos' pairs (all variants) and
    predicts the held-out videos' unaugmented pairs. ``predictor`` replaces
    train-and-predict entirely (e.g. to inject an oracle); it receives the
    fold's test entries and must return scores keyed by (clip_id, codec_id).
    """
    if not entries:
        raise ValueError("no manifest entries")
    clip_scores, _ = aggregate_ratings(list(ratings))
    rated = {(cs.clip_id, cs.codec_id) for cs in clip_scores}
    covered = {(e.clip_id, e.codec_id) for e in entries}
    if not rated.issubset(covered):
        raise ValueError(f"features missing for rated pairs: {sorted(rated - covered)}")

    folds = make_folds([e.clip_id for e in entries], k=k, seed=cfg.seed)
    per_fold = []
    for fold in folds:
        test_entries = [
            e for e in entries if e.clip_id in fold.test_video_ids and e.variant == test_variant
        ]
        if predictor is not None:
            predictions = predictor(test_entries)
        else:
            grouped: dict[tuple[str, str], TrainItem] = {}
            dmos_by_pair = {(e.clip_id, e.codec_id): e.dmos for e in entries}
            for e in entries:
                if e.clip_id not in fold.train_video_ids:
                    continue
                key = (e.clip_id, e.codec_id)
                item = grouped.setdefault(key, TrainItem(variants={}, dmos=dmos_by_pair[key]))
                item.variants[e.variant] = e.load()
            result = train(
                list(grouped.values()), cfg, model_init_seed=model_init_seed, model_config=model_config
            )
            predictions = {
                (e.clip_id, e.codec_id): forward(result.model, e.load()).score for e in test_entries
            }
        fold_scores = [cs for cs in clip_scores if cs.clip_id in fold.test_video_ids]
        per_fold.append(evaluate(predictions, fold_scores))

    clip_row = average_reports([r.clip_report for r in per_fold])
    model_row = average_reports([r.model_report for r in per_fold])
    return CrossvalResult(folds=folds, per_fold=per_fold, clip_row=clip_row, model_row=model_row)


def write_history_csv(history: list[dict], path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("epoch", "train_loss", "val_rmse", "lr"))
        for row in history:
            writer.writerow(
                (row["epoch"], repr(row["train_loss"]), repr(row["val_rmse"]), repr(row["lr"]))
            )
