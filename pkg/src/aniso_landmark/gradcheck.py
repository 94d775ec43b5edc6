"""Finite-difference audits of the closed-form and backpropagated gradients.

Each audit compares analytic gradients with central differences in float64
and reports the worst relative error over its trials, where the relative
error of one trial is ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .covariance import PositivityMode, cholesky_from_raw
from .heatmap import Activation, soft_argmax_values, soft_argmax_vjp
from .loss import LossConfig, batch_loss, nll_loss, nll_loss_grad
from .network import ModelConfig, init_params, model_forward
from .training import landmark_loss

STEP = 1e-5
THRESHOLDS = {"loss": 1e-4, "soft_argmax": 1e-4, "network": 1e-3}
# a coordinate whose central differences at STEP and STEP/10 disagree this much
# has a rectifier or max-pool switch within STEP; the difference quotient there
# is not a derivative, so the coordinate is redrawn
KINK_RTOL, KINK_ATOL = 1e-4, 1e-8
MAX_REDRAWS = 10


@dataclass
class AuditResult:
    name: str
    trials: int
    max_rel_error: float
    threshold: float
    skipped_kinks: int = 0

    @property
    def passed(self) -> bool:
        return self.trials == 0 or self.max_rel_error < self.threshold


def rel_error(analytic, numeric) -> float:
    analytic, numeric = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-300)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def central_difference(f, x: np.ndarray, h: float = STEP) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    for i in np.ndindex(x.shape):
        orig = x[i]
        x[i] = orig + h
        fp = f(x)
        x[i] = orig - h
        fm = f(x)
        x[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


def audit_loss(trials: int, rng: np.random.Generator, perturb: float = 0.0) -> AuditResult:
    """Landmark loss gradients w.r.t. prediction and raw outputs, both positivity modes."""
    worst = 0.0
    modes = list(PositivityMode)
    for t in range(trials):
        mode = modes[t % len(modes)]
        pred, gt = rng.uniform(0, 64, 2), rng.uniform(0, 64, 2)
        if t % 7 == 0:
            pred = gt + rng.normal(0, 0.5, 2)
        raw = rng.normal(0, 1.5, 3)
        cfg = LossConfig(alpha=float(rng.uniform(0, 2)))
        d_pred, d_raw = nll_loss_grad(pred, gt, raw, mode, cfg)
        n_pred = central_difference(lambda p: nll_loss(p, gt, cholesky_from_raw(raw, mode), cfg), pred)
        n_raw = central_difference(lambda r: nll_loss(pred, gt, cholesky_from_raw(r, mode), cfg), raw)
        a = np.concatenate([d_pred, d_raw]) * (1.0 + perturb)
        worst = max(worst, rel_error(a, np.concatenate([n_pred, n_raw])))
    return AuditResult("loss", trials, worst, THRESHOLDS["loss"])


def audit_soft_argmax(trials: int, rng: np.random.Generator, perturb: float = 0.0,
                      size: tuple[int, int] = (6, 7)) -> AuditResult:
    worst = 0.0
    acts = list(Activation)
    for t in range(trials):
        act = acts[t % len(acts)]
        if act is Activation.EXP_SOFTMAX:
            values = rng.normal(0, 2, size)
        else:
            # keep clear of the kink at zero so central differences are valid
            values = rng.uniform(0.1, 2.0, size) * rng.choice([-1.0, 1.0], size, p=[0.3, 0.7])
            values.flat[0] = abs(values.flat[0])
        w = rng.normal(0, 1, 2)
        analytic = soft_argmax_vjp(values, w, act) * (1.0 + perturb)
        numeric = central_difference(lambda v: float(soft_argmax_values(v, act) @ w), values)
        worst = max(worst, rel_error(analytic, numeric))
    return AuditResult("soft_argmax", trials, worst, THRESHOLDS["soft_argmax"])


AUDIT_MODEL = ModelConfig(input_size=(16, 16), num_landmarks=2, encoder_channels=(3, 4, 4, 4, 4),
                          msfd_dilations=(1, 2), attention_dim=3, pooled_resolution=(2, 2))


def audit_network(trials: int, rng: np.random.Generator, perturb: float = 0.0, params_per_trial: int = 20,
                  activation: Activation = Activation.EXP_SOFTMAX) -> AuditResult:
    """End-to-end gradient of the mean landmark loss w.r.t. random network parameters."""
    worst, skipped = 0.0, 0
    modes = list(PositivityMode)
    for t in range(trials):
        cfg = ModelConfig(**{**AUDIT_MODEL.to_dict(), "positivity_mode": modes[t % 2].value})
        params = init_params(cfg, int(rng.integers(2**31)), dtype=torch.float64)
        for name, p in params.items():
            if name.endswith(".bias"):
                p.copy_(torch.from_numpy(rng.normal(0, 0.1, tuple(p.shape))))
        images = torch.from_numpy(rng.uniform(0, 1, (2,) + cfg.input_size))
        gts = rng.uniform(2, 14, (2, cfg.num_landmarks, 2))
        loss_cfg = LossConfig(alpha=float(rng.uniform(0.05, 1.0)))

        def value(ps):
            with torch.no_grad():
                out = model_forward(images, ps, cfg)
                preds = soft_argmax_values(out.heatmaps.numpy(), activation)
                return batch_loss(preds, gts, out.raw_cholesky.numpy(), cfg.positivity_mode, loss_cfg).total

        leaves = {k: v.clone().requires_grad_(True) for k, v in params.items()}
        loss, _ = landmark_loss(model_forward(images, leaves, cfg), gts, cfg.positivity_mode, loss_cfg, activation)
        grads = dict(zip(leaves, torch.autograd.grad(loss, list(leaves.values()))))

        names = list(params)
        sizes = np.array([params[n].numel() for n in names], dtype=np.float64)

        def central(flat, i, h):
            orig = flat[i].item()
            flat[i] = orig + h
            fp = value(params)
            flat[i] = orig - h
            fm = value(params)
            flat[i] = orig
            return (fp - fm) / (2 * h)

        analytic, numeric = [], []
        for _ in range(params_per_trial):
            for attempt in range(MAX_REDRAWS + 1):
                name = names[rng.choice(len(names), p=sizes / sizes.sum())]
                flat_idx = int(rng.integers(params[name].numel()))
                flat = params[name].view(-1)
                num = central(flat, flat_idx, STEP)
                fine = central(flat, flat_idx, STEP / 10)
                if abs(num - fine) <= KINK_RTOL * max(abs(num), abs(fine)) + KINK_ATOL or attempt == MAX_REDRAWS:
                    break
                skipped += 1
            numeric.append(num)
            analytic.append(grads[name].view(-1)[flat_idx].item() * (1.0 + perturb))
        worst = max(worst, rel_error(analytic, numeric))
    return AuditResult("network", trials, worst, THRESHOLDS["network"], skipped)


def run_audits(seed: int = 0, trials: int = 1000, perturb: float = 0.0) -> list[AuditResult]:
    """All audits; ``trials`` scales the loss audit, the others use fixed fractions of it."""
    rng = np.random.default_rng(seed)
    return [
        audit_loss(trials, rng, perturb),
        audit_soft_argmax(max(trials // 5, 1) if trials else 0, rng, perturb),
        audit_network(max(trials // 10, 1) if trials else 0, rng, perturb),
    ]
