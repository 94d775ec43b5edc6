import csv

import numpy as np
import pytest
import torch

from aniso_landmark.data import Dataset, SceneConfig, generate_dataset
from aniso_landmark.heatmap import Activation, soft_argmax_values
from aniso_landmark.loss import LossConfig, batch_loss
from aniso_landmark.network import ModelConfig, ModelOutput, init_params, load_checkpoint, model_forward
from aniso_landmark.training import (
    BASELINE_MSE,
    AdamState,
    DivergenceError,
    TrainConfig,
    adam_step,
    landmark_loss,
    soft_argmax_torch,
    train,
)

SCENE = SceneConfig(image_size=(32, 32), num_landmarks=2, center_jitter=1.0, semi_axis_x=(6.0, 7.0),
                    semi_axis_y=(4.0, 5.0), noise_tangent_sigma=1.5, noise_normal_sigma=0.5)
MODEL = ModelConfig(input_size=(32, 32), num_landmarks=2, encoder_channels=(4, 8, 8, 8, 8),
                    attention_dim=4, pooled_resolution=(2, 2))


def make_dataset(count, seed=0):
    return Dataset(generate_dataset(SCENE, count, seed), SCENE.image_size, SCENE.num_landmarks)


def reference_adam(theta, grads, lr, b1, b2, eps, wd):
    """Plain numpy Adam with bias correction and decoupled decay."""
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * ((m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps) + wd * theta)
    return theta


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(adam_beta1=1.0)
    with pytest.raises(ValueError):
        TrainConfig(baseline="other")
    cfg = TrainConfig(positivity_mode="diag-only", activation="relu")
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_adam_zero_gradient_is_fixed_point():
    p = {"w": torch.tensor([1.0, -2.0], dtype=torch.float64)}
    adam_step(p, {"w": torch.zeros(2, dtype=torch.float64)}, AdamState(), TrainConfig(weight_decay=0.0))
    assert torch.equal(p["w"], torch.tensor([1.0, -2.0], dtype=torch.float64))


def test_adam_first_step_closed_form():
    cfg = TrainConfig(learning_rate=1e-2, weight_decay=0.0)
    g = torch.tensor([0.3, -4.0, 1e-3], dtype=torch.float64)
    p = {"w": torch.zeros(3, dtype=torch.float64)}
    adam_step(p, {"w": g}, AdamState(), cfg)
    torch.testing.assert_close(p["w"], -cfg.learning_rate * g / (g.abs() + cfg.adam_epsilon), rtol=1e-12, atol=0)


def test_adam_matches_reference_over_many_steps():
    rng = np.random.default_rng(0)
    cfg = TrainConfig(learning_rate=3e-3, weight_decay=1e-2)
    theta0 = rng.normal(size=5)
    grads = [rng.normal(size=5) for _ in range(25)]
    p, state = {"w": torch.from_numpy(theta0.copy())}, AdamState()
    for g in grads:
        adam_step(p, {"w": torch.from_numpy(g)}, state, cfg)
    expected = reference_adam(theta0, grads, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2,
                              cfg.adam_epsilon, cfg.weight_decay)
    np.testing.assert_allclose(p["w"].numpy(), expected, rtol=1e-12)


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step({"w": torch.zeros(2)}, {"w": torch.zeros(3)}, AdamState(), TrainConfig())
    with pytest.raises(ValueError):
        adam_step({"w": torch.zeros(2)}, {"v": torch.zeros(2)}, AdamState(), TrainConfig())


@pytest.mark.parametrize("activation", list(Activation))
def test_soft_argmax_torch_backward_matches_fd(activation):
    gen = torch.Generator().manual_seed(0)
    if activation is Activation.EXP_SOFTMAX:
        x = torch.randn(2, 1, 5, 6, dtype=torch.float64, generator=gen)
    else:
        x = torch.rand(2, 1, 5, 6, dtype=torch.float64, generator=gen) + 0.1
    x.requires_grad_(True)
    assert torch.autograd.gradcheck(lambda h: soft_argmax_torch(h, activation), (x,), eps=1e-6, atol=1e-7)
    np.testing.assert_array_equal(soft_argmax_torch(x, activation).detach().numpy(),
                                  soft_argmax_values(x.detach().numpy(), activation))


def test_landmark_loss_gradients_match_fd():
    gen = torch.Generator().manual_seed(1)
    heat = torch.randn(2, 2, 6, 6, dtype=torch.float64, generator=gen).requires_grad_(True)
    raw = torch.randn(2, 2, 3, dtype=torch.float64, generator=gen).requires_grad_(True)
    gts = np.random.default_rng(2).uniform(1, 5, (2, 2, 2))
    cfg = LossConfig(0.5)

    def f(h, r):
        return landmark_loss(ModelOutput(h, r), gts, "diag-only", cfg, Activation.EXP_SOFTMAX)[0]

    assert torch.autograd.gradcheck(f, (heat, raw), eps=1e-6, atol=1e-7)
    total, br = landmark_loss(ModelOutput(heat, raw), gts, "diag-only", cfg, Activation.EXP_SOFTMAX)
    preds = soft_argmax_values(heat.detach().numpy(), Activation.EXP_SOFTMAX)
    ref = batch_loss(preds, gts, raw.detach().numpy(), "diag-only", cfg)
    assert total.item() == pytest.approx(ref.total, rel=1e-14)
    assert br.total == ref.total


def test_zero_steps_returns_initial_params(tmp_path):
    ds = make_dataset(2)
    params, tlog = train(ds, MODEL, TrainConfig(steps=0), tmp_path)
    init = init_params(MODEL, MODEL.seed)
    assert all(torch.equal(params[k], init[k]) for k in init)
    assert tlog.records == [] and [p.name for p in tlog.checkpoints] == ["step_000000.json"]


def test_single_sample_overfit_reduces_loss():
    ds = make_dataset(1, seed=4)
    _, tlog = train(ds, MODEL, TrainConfig(steps=200, learning_rate=1e-3, batch_size=1))
    assert len(tlog.records) == 200
    assert tlog.losses[-1] < tlog.losses[0]


def test_training_is_reproducible(tmp_path):
    ds = make_dataset(6)
    cfg = TrainConfig(steps=12, batch_size=4, checkpoint_every=5, seed=3)
    p1, l1 = train(ds, MODEL, cfg, tmp_path / "a")
    p2, l2 = train(ds, MODEL, cfg, tmp_path / "b")
    assert l1.losses == l2.losses
    assert [p.name for p in l1.checkpoints] == [
        "step_000000.json", "step_000005.json", "step_000010.json", "step_000012.json"]
    for a, b in zip(l1.checkpoints, l2.checkpoints):
        assert a.with_suffix(".bin").read_bytes() == b.with_suffix(".bin").read_bytes()
    q, _, extra = load_checkpoint(l1.checkpoints[-1])
    assert all(torch.equal(q[k], p1[k]) for k in q)
    assert extra["step"] == 12 and extra["train"]["seed"] == 3
    _, l3 = train(ds, MODEL, TrainConfig(steps=12, batch_size=4, seed=4))
    assert l3.losses != l1.losses


def test_log_csv_columns(tmp_path):
    ds = make_dataset(3)
    train(ds, MODEL, TrainConfig(steps=3, batch_size=2), tmp_path / "nll")
    train(ds, MODEL, TrainConfig(steps=3, batch_size=2, baseline=BASELINE_MSE), tmp_path / "mse")
    with open(tmp_path / "nll" / "train_log.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "loss", "mahalanobis", "logdet", "wall_clock"] and len(rows) == 4
    alpha = TrainConfig().alpha
    for r in rows[1:]:
        assert float(r[1]) == pytest.approx(float(r[2]) + alpha * float(r[3]), rel=1e-12)
    with open(tmp_path / "mse" / "train_log.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "loss", "mse", "wall_clock"] and len(rows) == 4


def test_baseline_runs_and_leaves_covariance_branch_untouched():
    ds = make_dataset(3)
    params, tlog = train(ds, MODEL, TrainConfig(steps=5, batch_size=2, baseline=BASELINE_MSE, weight_decay=0.0))
    init = init_params(MODEL, MODEL.seed)
    assert all(np.isfinite(tlog.losses))
    assert torch.equal(params["cov_head.weight"], init["cov_head.weight"])
    assert not torch.equal(params["heatmap_head.weight"], init["heatmap_head.weight"])


def test_covariance_head_receives_gradient_at_init():
    ds = make_dataset(4)
    params = {k: v.requires_grad_(True) for k, v in init_params(MODEL, 0).items()}
    out = model_forward(torch.from_numpy(ds.images()).float(), params, MODEL)
    loss, _ = landmark_loss(out, ds.annotations(), MODEL.positivity_mode, LossConfig(0.1), Activation.EXP_SOFTMAX)
    (g,) = torch.autograd.grad(loss, params["cov_head.bias"])
    assert torch.count_nonzero(g) == g.numel()


def test_divergence_on_degenerate_heatmap():
    ds = make_dataset(2)
    params = init_params(MODEL, 0)
    params["heatmap_head.weight"].zero_()
    params["heatmap_head.bias"].fill_(-1.0)
    with pytest.raises(DivergenceError, match="step 1"):
        train(ds, MODEL, TrainConfig(steps=3, activation="relu"), params=params)


def test_dataset_model_mismatch():
    with pytest.raises(ValueError, match="does not match"):
        train(make_dataset(1), ModelConfig(), TrainConfig(steps=1))
    with pytest.raises(ValueError, match="empty"):
        train(Dataset([], (32, 32), 2), MODEL, TrainConfig(steps=1))
