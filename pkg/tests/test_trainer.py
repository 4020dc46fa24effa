"""Folds, schedule, Adam, and the training loop."""

import math

import numpy as np
import pytest

from mlcvqa.features import FeatureSequence
from mlcvqa.model import ModelConfig, forward, init_model, zero_grads
from mlcvqa.subjective import aggregate_ratings
from mlcvqa.trainer import (
    AdamState,
    ManifestEntry,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    crossval,
    lr_schedule,
    make_folds,
    train,
    write_history_csv,
)

from conftest import make_ratings

SMALL_MODEL = ModelConfig(input_dim=16, proj_dim=8, mlp_hidden=8)


def seq(data, clip="c", variant="none"):
    return FeatureSequence(clip_id=clip, variant=variant, data=np.asarray(data, dtype=np.float32))


def teacher_dataset(n, t=5, d=16, seed=0):
    """DMOS from a linear read-out of the feature row-mean, clamped to scale."""
    rng = np.random.default_rng(seed)
    w = rng.normal(size=d)
    dataset = []
    for i in range(n):
        x = rng.normal(size=(t, d))
        dmos = float(np.clip(x.mean(axis=0) @ w + 5.0, 1.0, 9.0))
        dataset.append((seq(x.astype(np.float32), clip=f"c{i}"), dmos))
    return dataset


# ---------------------------------------------------------------- folds

def test_thirty_videos_give_five_folds_of_six():
    folds = make_folds([f"v{i}" for i in range(30)], k=5, seed=0)
    assert len(folds) == 5
    assert all(len(f.test_video_ids) == 6 for f in folds)


def test_folds_deterministic_and_partitioning():
    ids = [f"v{i}" for i in range(23)]
    a = make_folds(ids, k=5, seed=9)
    b = make_folds(ids, k=5, seed=9)
    assert [f.test_video_ids for f in a] == [f.test_video_ids for f in b]
    union = set()
    for f in a:
        assert not (union & f.test_video_ids)
        union |= f.test_video_ids
        assert f.train_video_ids == set(ids) - f.test_video_ids
    assert union == set(ids)


def test_folds_reject_k_too_large():
    with pytest.raises(ValueError, match="exceeds"):
        make_folds(["a", "b"], k=5)


# ---------------------------------------------------------------- schedule

CFG = TrainConfig(warmup_epochs=10, epochs_after_warmup=200, max_lr=4e-4)


def test_lr_reaches_max_at_end_of_warmup():
    steps = 7
    assert lr_schedule(10 * steps - 1, steps, CFG) == pytest.approx(4e-4)


def test_lr_continuous_at_warmup_boundary():
    steps = 7
    end_warmup = lr_schedule(10 * steps - 1, steps, CFG)
    start_decay = lr_schedule(10 * steps, steps, CFG)
    assert abs(end_warmup - 4e-4) < 1e-12
    assert abs(start_decay - 4e-4) < 1e-12


def test_lr_final_step_near_zero():
    steps = 7
    final = lr_schedule((10 + 200) * steps - 1, steps, CFG)
    assert final == pytest.approx(0.0, abs=1e-9)


def test_lr_mid_decay_is_half_max():
    cfg = TrainConfig(warmup_epochs=10, epochs_after_warmup=200, max_lr=4e-4)
    steps = 10
    warmup_steps = 10 * steps
    decay_steps = 200 * steps
    mid = warmup_steps + (decay_steps - 1) // 2
    # progress 0.5 is exactly representable only for odd decay spans; accept
    # the neighbouring step's value
    assert lr_schedule(mid, steps, cfg) == pytest.approx(2e-4, rel=1e-2)


def test_lr_warmup_is_linear():
    cfg = TrainConfig(warmup_epochs=2, epochs_after_warmup=2, max_lr=1.0)
    values = [lr_schedule(s, 5, cfg) for s in range(10)]
    np.testing.assert_allclose(np.diff(values), 0.1, atol=1e-12)


# ---------------------------------------------------------------- Adam

def test_adam_zero_gradients_fixed_point_without_decay():
    model = init_model(SMALL_MODEL, seed=0)
    before = {name: p.copy() for name, p in model.named_params()}
    state = AdamState.for_model(model)
    cfg = TrainConfig(weight_decay=0.0)
    adam_step(model, zero_grads(model), state, lr=1e-3, cfg=cfg)
    for name, p in model.named_params():
        np.testing.assert_array_equal(p, before[name])


def test_adam_zero_gradients_only_decay():
    model = init_model(SMALL_MODEL, seed=0)
    before = {name: p.copy() for name, p in model.named_params()}
    state = AdamState.for_model(model)
    cfg = TrainConfig(weight_decay=0.1)
    adam_step(model, zero_grads(model), state, lr=0.5, cfg=cfg)
    for name, p in model.named_params():
        np.testing.assert_allclose(p, before[name] * (1.0 - 0.5 * 0.1), atol=1e-15)


# ---------------------------------------------------------------- train

def test_zero_learning_rate_changes_nothing():
    dataset = teacher_dataset(8)
    cfg = TrainConfig(batch_size=4, max_lr=0.0, warmup_epochs=1, epochs_after_warmup=3, seed=0)
    result = train(dataset, cfg, model_init_seed=1, model_config=SMALL_MODEL)
    fresh = init_model(SMALL_MODEL, seed=1)
    for (_, pa), (_, pb) in zip(result.model.named_params(), fresh.named_params()):
        np.testing.assert_array_equal(pa, pb)


def test_training_fits_linear_teacher_quickly():
    dataset = teacher_dataset(64, seed=3)
    cfg = TrainConfig(
        batch_size=16, max_lr=3e-3, warmup_epochs=3, epochs_after_warmup=60, seed=1
    )
    result = train(dataset, cfg, model_init_seed=2, model_config=SMALL_MODEL, val_dataset=dataset[:8])
    losses = [row["train_loss"] for row in result.history]
    assert losses[-1] < losses[0] / 5
    assert all(math.isfinite(row["val_rmse"]) for row in result.history)
    # averaged over 10-epoch windows the loss keeps going down
    windows = [float(np.mean(losses[i : i + 10])) for i in range(0, 60, 10)]
    assert all(a >= b for a, b in zip(windows, windows[1:]))


def test_training_deterministic():
    dataset = teacher_dataset(12, seed=5)
    cfg = TrainConfig(batch_size=4, max_lr=1e-3, warmup_epochs=1, epochs_after_warmup=4, seed=7)
    a = train(dataset, cfg, model_init_seed=3, model_config=SMALL_MODEL)
    b = train(dataset, cfg, model_init_seed=3, model_config=SMALL_MODEL)
    for (_, pa), (_, pb) in zip(a.model.named_params(), b.model.named_params()):
        np.testing.assert_array_equal(pa, pb)
    assert a.history == b.history


def test_duplicated_dataset_with_aligned_batches_matches():
    # interleaved duplication + doubled batch size reproduces every batch
    # mean, so the trajectories coincide (up to summation rounding)
    dataset = teacher_dataset(8, seed=11)
    duplicated = []
    for item in dataset:
        duplicated.extend([item, item])
    base_cfg = dict(max_lr=1e-3, warmup_epochs=1, epochs_after_warmup=5, seed=0, shuffle=False)
    a = train(dataset, TrainConfig(batch_size=4, **base_cfg), model_init_seed=4, model_config=SMALL_MODEL)
    b = train(duplicated, TrainConfig(batch_size=8, **base_cfg), model_init_seed=4, model_config=SMALL_MODEL)
    for (_, pa), (_, pb) in zip(a.model.named_params(), b.model.named_params()):
        np.testing.assert_allclose(pa, pb, rtol=1e-12, atol=1e-12)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_loss_aborts_with_diagnostics():
    dataset = teacher_dataset(8, seed=2)
    cfg = TrainConfig(batch_size=8, max_lr=1e30, warmup_epochs=1, epochs_after_warmup=50, seed=0)
    with pytest.raises(TrainingDiverged) as err:
        train(dataset, cfg, model_init_seed=0, model_config=SMALL_MODEL)
    assert err.value.epoch >= 0
    assert err.value.param_norms


def test_temporal_subsample_doubles_samples_per_epoch():
    dataset = teacher_dataset(6, t=8)
    cfg = TrainConfig(
        batch_size=4, max_lr=1e-3, warmup_epochs=1, epochs_after_warmup=2, seed=0,
        temporal_subsample=True,
    )
    result = train(dataset, cfg, model_init_seed=0, model_config=SMALL_MODEL)
    assert result.history  # 12 samples -> 3 batches per epoch, runs to completion


def test_augmented_variant_selection_is_seeded():
    rng = np.random.default_rng(0)
    items = []
    from mlcvqa.trainer import TrainItem

    for i in range(6):
        x = rng.normal(size=(4, 16)).astype(np.float32)
        items.append(
            TrainItem(
                variants={
                    "none": seq(x, clip=f"c{i}"),
                    "hflip": seq(x + 1.0, clip=f"c{i}", variant="hflip"),
                },
                dmos=5.0,
            )
        )
    cfg = TrainConfig(
        batch_size=3, max_lr=1e-3, warmup_epochs=1, epochs_after_warmup=2, seed=3,
        use_augmented_variants=True,
    )
    a = train(items, cfg, model_init_seed=1, model_config=SMALL_MODEL)
    b = train(items, cfg, model_init_seed=1, model_config=SMALL_MODEL)
    for (_, pa), (_, pb) in zip(a.model.named_params(), b.model.named_params()):
        np.testing.assert_array_equal(pa, pb)


def test_history_csv(tmp_path):
    dataset = teacher_dataset(4)
    cfg = TrainConfig(batch_size=4, max_lr=1e-3, warmup_epochs=1, epochs_after_warmup=1, seed=0)
    result = train(dataset, cfg, model_init_seed=0, model_config=SMALL_MODEL)
    path = tmp_path / "history.csv"
    write_history_csv(result.history, str(path))
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_rmse,lr"
    assert len(lines) == 1 + cfg.total_epochs


# ---------------------------------------------------------------- crossval

def _manifest_with_oracle(n_clips=10, n_codecs=3):
    ratings = make_ratings(n_clips=n_clips, n_codecs=n_codecs, votes_per_item=5, seed=4)
    clip_scores, _ = aggregate_ratings(ratings)
    rng = np.random.default_rng(0)
    entries = []
    dmos = {(cs.clip_id, cs.codec_id): cs.dmos for cs in clip_scores}
    for (clip, codec), value in sorted(dmos.items()):
        entries.append(
            ManifestEntry(
                clip_id=clip,
                codec_id=codec,
                variant="none",
                dmos=value,
                features=seq(rng.normal(size=(4, 16)).astype(np.float32), clip=clip),
            )
        )
    return entries, ratings, dmos


def test_crossval_with_oracle_predictor():
    entries, ratings, dmos = _manifest_with_oracle()
    cfg = TrainConfig(batch_size=4, warmup_epochs=1, epochs_after_warmup=1, seed=0)

    def oracle(test_entries):
        return {(e.clip_id, e.codec_id): dmos[(e.clip_id, e.codec_id)] for e in test_entries}

    result = crossval(entries, ratings, cfg, k=5, predictor=oracle)
    assert result.clip_row.pcc == pytest.approx(1.0, abs=1e-12)
    assert result.clip_row.srcc == pytest.approx(1.0, abs=1e-12)
    assert result.clip_row.rmse == pytest.approx(0.0, abs=1e-12)
    assert result.model_row.pcc == pytest.approx(1.0, abs=1e-12)
    assert len(result.per_fold) == 5


def test_crossval_trains_and_is_deterministic():
    entries, ratings, _ = _manifest_with_oracle(n_clips=5, n_codecs=2)
    cfg = TrainConfig(batch_size=4, max_lr=1e-3, warmup_epochs=1, epochs_after_warmup=2, seed=1)
    a = crossval(entries, ratings, cfg, k=5, model_config=SMALL_MODEL)
    b = crossval(entries, ratings, cfg, k=5, model_config=SMALL_MODEL)
    assert a.clip_row == b.clip_row
    assert a.model_row == b.model_row


def test_crossval_rejects_missing_features():
    entries, ratings, _ = _manifest_with_oracle(n_clips=5, n_codecs=2)
    with pytest.raises(ValueError, match="missing"):
        crossval(entries[:-1], ratings, TrainConfig(), k=5)
