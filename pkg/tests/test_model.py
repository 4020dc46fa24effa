"""Quality model: forward, loss, exact gradients, checkpoints."""

import math

import numpy as np
import pytest

from mlcvqa.model import (
    ModelConfig,
    QualityModel,
    backward,
    forward,
    init_model,
    load_model,
    save_model,
    smooth_l1,
    smooth_l1_grad,
    zero_grads,
)

SMALL = ModelConfig(input_dim=16, proj_dim=8, mlp_hidden=8)


# ---------------------------------------------------------------- init

def test_init_deterministic():
    a = init_model(SMALL, seed=7)
    b = init_model(SMALL, seed=7)
    for (_, pa), (_, pb) in zip(a.named_params(), b.named_params()):
        np.testing.assert_array_equal(pa, pb)


def test_init_seed_changes_weights():
    a = init_model(SMALL, seed=1)
    b = init_model(SMALL, seed=2)
    assert not np.array_equal(a.proj.w, b.proj.w)


def test_init_weights_within_fan_in_bound():
    model = init_model(SMALL, seed=3)
    k = SMALL.conv_kernel
    assert np.abs(model.proj.w).max() <= 1.0 / math.sqrt(SMALL.input_dim * k)
    for conv in model.convs:
        assert np.abs(conv.w).max() <= 1.0 / math.sqrt(SMALL.proj_dim * k)
    assert np.abs(model.mlp[0].w).max() <= 1.0 / math.sqrt(SMALL.proj_dim)
    assert np.abs(model.mlp[1].w).max() <= 1.0 / math.sqrt(SMALL.mlp_hidden)
    for name, p in model.named_params():
        if name.endswith(".b"):
            assert np.all(p == 0.0)


def test_zero_input_scores_zero_bias():
    model = init_model(SMALL, seed=0)
    pred = forward(model, np.zeros((4, 16)))
    np.testing.assert_allclose(pred.per_step, 0.0)
    assert pred.score == 0.0


def test_config_validation():
    with pytest.raises(ValueError, match="odd"):
        ModelConfig(conv_kernel=4, conv_padding=1)
    with pytest.raises(ValueError, match="padding"):
        ModelConfig(conv_kernel=3, conv_padding=2)
    with pytest.raises(ValueError, match="stride"):
        ModelConfig(conv_stride=2)


# ---------------------------------------------------------------- forward

def test_forward_preserves_time_dimension(rng):
    model = init_model(ModelConfig(), seed=0)
    x = rng.normal(size=(15, 4960))
    pred = forward(model, x)
    assert pred.per_step.shape == (15,)
    assert pred.score == pytest.approx(float(pred.per_step.mean()))


def test_forward_t_preservation_property(rng):
    model = init_model(SMALL, seed=1)
    for _ in range(20):
        t = int(rng.integers(1, 40))
        assert forward(model, rng.normal(size=(t, 16))).per_step.shape == (t,)


def test_zeroed_final_layer_scores_zero(rng):
    model = init_model(SMALL, seed=2)
    model.mlp[1].w[:] = 0.0
    model.mlp[1].b[:] = 0.0
    assert forward(model, rng.normal(size=(5, 16))).score == 0.0


def test_single_timestep_matches_dense_oracle(rng):
    # with T=1 and zero padding only the center kernel tap touches data, so
    # the whole network collapses to plain matrix arithmetic
    model = init_model(SMALL, seed=4)
    x = rng.normal(size=(1, 16))
    h = x[0]
    h = np.maximum(model.proj.w[:, :, 1] @ h + model.proj.b, 0.0)
    for conv in model.convs:
        h = np.maximum(conv.w[:, :, 1] @ h + conv.b, 0.0)
    h = np.maximum(model.mlp[0].w @ h + model.mlp[0].b, 0.0)
    expected = float((model.mlp[1].w @ h + model.mlp[1].b)[0])
    assert forward(model, x).score == pytest.approx(expected, abs=1e-12)


def test_mean_pooling_equivariance_with_center_tap_model(rng):
    # zero the off-center taps: each step's output then depends only on its
    # own row, and duplicating a row that already scores the mean cannot
    # move the clip score
    model = init_model(SMALL, seed=5)
    for conv in (model.proj, *model.convs):
        conv.w[:, :, 0] = 0.0
        conv.w[:, :, 2] = 0.0
    row = rng.normal(size=16)
    x = np.tile(row, (4, 1))
    base = forward(model, x)
    mean_row_input = np.vstack([row, x])
    extended = forward(model, mean_row_input)
    assert extended.score == pytest.approx(base.score, abs=1e-12)


def test_input_dim_mismatch_errors(rng):
    model = init_model(SMALL, seed=0)
    with pytest.raises(ValueError, match="dims"):
        forward(model, rng.normal(size=(3, 12)))


# ---------------------------------------------------------------- loss

def test_smooth_l1_values():
    assert smooth_l1(5.0, 5.0) == 0.0
    assert smooth_l1(3.0, 3.4) == pytest.approx(0.08, abs=1e-12)
    assert smooth_l1(1.0, 3.0) == pytest.approx(1.5, abs=1e-12)


def test_smooth_l1_continuity_at_unit_error():
    # evaluate both branch formulas exactly at the joint: values and
    # one-sided slopes (e from the quadratic side, 1 from the linear side)
    e = 1.0
    quad_value, linear_value = 0.5 * e * e, abs(e) - 0.5
    assert quad_value == pytest.approx(linear_value, abs=1e-12)
    quad_slope, linear_slope = e, 1.0
    assert quad_slope == pytest.approx(linear_slope, abs=1e-12)
    eps = 1e-9
    assert smooth_l1(0.0, 1.0 - eps) == pytest.approx(0.5, abs=1e-8)
    assert smooth_l1(0.0, 1.0 + eps) == pytest.approx(0.5, abs=1e-8)


def test_smooth_l1_grad_matches_regions():
    assert smooth_l1_grad(3.0, 3.4) == pytest.approx(0.4, abs=1e-12)
    assert smooth_l1_grad(1.0, 3.0) == 1.0
    assert smooth_l1_grad(3.0, 1.0) == -1.0


# ---------------------------------------------------------------- backward

def test_backward_at_zero_parameters(rng):
    model = init_model(SMALL, seed=0)
    for _, p in model.named_params():
        p[:] = 0.0
    x = rng.normal(size=(3, 16))
    y = 4.0
    loss, grads = backward(model, x, y)
    assert loss == pytest.approx(smooth_l1(y, 0.0))
    expected_bias_grad = smooth_l1_grad(y, 0.0)
    np.testing.assert_allclose(grads.mlp[1].b, [expected_bias_grad])
    for name, g in grads.named_params():
        if name != "mlp[1].b":
            np.testing.assert_allclose(g, 0.0)


def _flatten(model):
    return np.concatenate([p.ravel() for _, p in model.named_params()])


def _load_flat(model, flat):
    pos = 0
    for _, p in model.named_params():
        p[:] = flat[pos : pos + p.size].reshape(p.shape)
        pos += p.size


def finite_difference_grads(model, x, y, h=1e-3):
    flat = _flatten(model)
    grads = np.empty_like(flat)
    for i in range(len(flat)):
        bumped = flat.copy()
        bumped[i] = flat[i] + h
        _load_flat(model, bumped)
        up = smooth_l1(y, forward(model, x).score)
        bumped[i] = flat[i] - h
        _load_flat(model, bumped)
        down = smooth_l1(y, forward(model, x).score)
        grads[i] = (up - down) / (2 * h)
    _load_flat(model, flat)
    return grads


def _well_conditioned_case(seed, t, min_margin=0.02):
    """Model/input/target away from ReLU and loss kinks so a 1e-3 central
    difference sees a locally smooth function; draws are rejected until
    every preactivation clears the margin."""
    from mlcvqa.model import _as_input, _forward_trace

    while True:
        rng = np.random.default_rng(seed)
        model = init_model(SMALL, seed=seed)
        for _, p in model.named_params():
            if p.ndim > 1:
                p += 0.05 * np.sign(p)
        x = rng.normal(size=(t, 16))
        _, preacts, _, z1, _, _ = _forward_trace(model, _as_input(x))
        margin = min(min(float(np.abs(z).min()) for z in preacts), float(np.abs(z1).min()))
        if margin > min_margin:
            break
        seed += 1000
    pred = forward(model, x)
    y = pred.score + (0.4 if seed % 2 == 0 else 1.7)
    return model, x, y


@pytest.mark.parametrize("t", [1, 3, 7])
def test_backward_matches_finite_differences(t):
    worst = 0.0
    for seed in range(3):
        model, x, y = _well_conditioned_case(seed * 13 + t, t)
        _, analytic = backward(model, x, y)
        flat_analytic = _flatten(analytic)
        flat_fd = finite_difference_grads(model, x, y)
        rel = np.abs(flat_analytic - flat_fd) / np.maximum(
            1.0, np.maximum(np.abs(flat_analytic), np.abs(flat_fd))
        )
        worst = max(worst, float(rel.max()))
    assert worst < 1e-4


def test_duplicated_batch_gradient_equals_single(rng):
    model = init_model(SMALL, seed=9)
    x = rng.normal(size=(4, 16))
    y = 5.0
    _, single = backward(model, x, y)
    # mean reduction over the two identical samples
    acc = zero_grads(model)
    for _ in range(2):
        _, g = backward(model, x, y)
        for (_, a), (_, b) in zip(acc.named_params(), g.named_params()):
            a += 0.5 * b
    for (_, a), (_, b) in zip(acc.named_params(), single.named_params()):
        np.testing.assert_allclose(a, b, atol=1e-15)


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path, rng):
    model = init_model(SMALL, seed=11)
    path = tmp_path / "model.mlqm"
    save_model(model, str(path))
    loaded = load_model(str(path))
    assert loaded.config == model.config
    x = rng.normal(size=(3, 16))
    # parameters are stored as float32, so scores agree to that precision
    assert forward(loaded, x).score == pytest.approx(forward(model, x).score, abs=1e-5)
    save_model(loaded, str(path))
    again = load_model(str(path))
    for (_, pa), (_, pb) in zip(loaded.named_params(), again.named_params()):
        np.testing.assert_array_equal(pa, pb)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.mlqm"
    path.write_bytes(b"WXYZ" + b"\0" * 64)
    with pytest.raises(ValueError, match="magic"):
        load_model(str(path))
