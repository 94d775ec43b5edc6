"""Deterministic Adam training of the landmark model.

The network runs in torch; the soft-argmax decode and the landmark loss run in
float64 numpy and hand their closed-form gradients back to torch through
small ``autograd.Function`` adapters.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .covariance import PositivityMode
from .data import Dataset
from .heatmap import Activation, DegenerateHeatmapError, Grid, HeatmapConfig, render_isotropic, \
    soft_argmax_values, soft_argmax_vjp
from .loss import LossConfig, batch_loss_and_grad
from .network import ModelConfig, init_params, model_forward, save_checkpoint

log = logging.getLogger(__name__)

BASELINE_MSE = "mse-fixed-sigma"
_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-4
    weight_decay: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    batch_size: int = 8
    steps: int = 3000
    seed: int = 0
    positivity_mode: PositivityMode | None = None
    alpha: float = 0.1
    activation: Activation = Activation.EXP_SOFTMAX
    gamma: float = 1000.0
    checkpoint_every: int = 0
    baseline: str | None = None
    baseline_sigma: float = 2.0
    dtype: str = "float32"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.batch_size < 1 or self.steps < 0 or self.checkpoint_every < 0:
            raise ValueError("batch_size must be >= 1, steps and checkpoint_every >= 0")
        if self.baseline not in (None, BASELINE_MSE):
            raise ValueError(f"unknown baseline {self.baseline!r}")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")
        if self.positivity_mode is not None:
            object.__setattr__(self, "positivity_mode", PositivityMode(self.positivity_mode))
        object.__setattr__(self, "activation", Activation(self.activation))
        LossConfig(self.alpha)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["positivity_mode"] = self.positivity_mode.value if self.positivity_mode else None
        d["activation"] = self.activation.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class StepRecord:
    step: int
    loss: float
    mahalanobis: float = float("nan")
    logdet: float = float("nan")
    mse: float = float("nan")
    wall_clock: float = 0.0


@dataclass
class TrainLog:
    records: list[StepRecord] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    baseline: str | None = None

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.records]

    def write_csv(self, path) -> None:
        if self.baseline == BASELINE_MSE:
            cols = ["step", "loss", "mse", "wall_clock"]
        else:
            cols = ["step", "loss", "mahalanobis", "logdet", "wall_clock"]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(cols)
            for r in self.records:
                writer.writerow([r.step] + [repr(float(getattr(r, c))) for c in cols[1:]])


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig) -> AdamState:
    """One in-place Adam update with bias correction and decoupled weight decay.

    ``theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta``
    """
    if set(params) != set(grads):
        raise ValueError("params and grads must have the same names")
    state.step += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    with torch.no_grad():
        for name in params:
            p, g = params[name], grads[name]
            if p.shape != g.shape:
                raise ValueError(f"{name}: param shape {tuple(p.shape)} != grad shape {tuple(g.shape)}")
            if name not in state.m:
                state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            m, v = state.m[name], state.v[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            update = (m / bc1) / ((v / bc2).sqrt() + cfg.adam_epsilon)
            if cfg.weight_decay:
                update = update + cfg.weight_decay * p
            p.sub_(cfg.learning_rate * update)
    return state


class SoftArgmaxFn(torch.autograd.Function):
    """(B, N, H, W) heatmaps -> (B, N, 2) float64 coordinates, analytic backward."""

    @staticmethod
    def forward(ctx, heatmaps, activation):
        values = heatmaps.detach().to(torch.float64).cpu().numpy()
        ctx.values, ctx.activation, ctx.in_dtype = values, activation, heatmaps.dtype
        return torch.from_numpy(soft_argmax_values(values, activation))

    @staticmethod
    def backward(ctx, grad):
        g = soft_argmax_vjp(ctx.values, grad.detach().cpu().numpy(), ctx.activation)
        return torch.from_numpy(g).to(ctx.in_dtype), None


class _PrecomputedGrad(torch.autograd.Function):
    """Scalar whose gradients w.r.t. ``preds`` and ``raws`` were computed in closed form."""

    @staticmethod
    def forward(ctx, preds, raws, value, d_pred, d_raw):
        ctx.save_for_backward(d_pred, d_raw)
        return value.clone()

    @staticmethod
    def backward(ctx, grad):
        d_pred, d_raw = ctx.saved_tensors
        return grad * d_pred, grad * d_raw, None, None, None


def soft_argmax_torch(heatmaps: torch.Tensor, activation=Activation.RELU) -> torch.Tensor:
    return SoftArgmaxFn.apply(heatmaps, Activation(activation))


def landmark_loss(output, gts, mode, loss_cfg: LossConfig, activation=Activation.RELU):
    """Decode heatmaps and apply the mean landmark NLL. Returns (loss tensor, LossBreakdown)."""
    preds = soft_argmax_torch(output.heatmaps, activation)
    raws = output.raw_cholesky.to(torch.float64)
    breakdown, d_pred, d_raw = batch_loss_and_grad(
        preds.detach().numpy(), np.asarray(gts, dtype=np.float64), raws.detach().numpy(), mode, loss_cfg)
    value = torch.tensor(breakdown.total, dtype=torch.float64)
    total = _PrecomputedGrad.apply(preds, raws, value, torch.from_numpy(d_pred), torch.from_numpy(d_raw))
    return total, breakdown


def baseline_targets(annotations: np.ndarray, sigma: float, hcfg: HeatmapConfig, grid: Grid) -> np.ndarray:
    """Isotropic fixed-sigma target heatmaps of shape (M, N, H, W)."""
    out = np.empty(annotations.shape[:2] + grid.shape)
    for i, sample in enumerate(annotations):
        for j, xy in enumerate(sample):
            out[i, j] = render_isotropic(xy, sigma, hcfg, grid).values
    return out


def effective_model_config(model_cfg: ModelConfig, train_cfg: TrainConfig) -> ModelConfig:
    if train_cfg.positivity_mode is not None and train_cfg.positivity_mode != model_cfg.positivity_mode:
        return replace(model_cfg, positivity_mode=train_cfg.positivity_mode)
    return model_cfg


def train(dataset: Dataset, model_cfg: ModelConfig, train_cfg: TrainConfig, out_dir=None,
          params: dict | None = None) -> tuple[dict, TrainLog]:
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    model_cfg = effective_model_config(model_cfg, train_cfg)
    if tuple(dataset.image_size) != model_cfg.input_size or dataset.num_landmarks != model_cfg.num_landmarks:
        raise ValueError(f"dataset ({dataset.image_size}, N={dataset.num_landmarks}) does not match "
                         f"model ({model_cfg.input_size}, N={model_cfg.num_landmarks})")
    dtype = _DTYPES[train_cfg.dtype]
    if params is None:
        params = init_params(model_cfg, model_cfg.seed, dtype=dtype)
    params = {k: v.detach().clone().to(dtype).requires_grad_(True) for k, v in params.items()}
    images = torch.from_numpy(dataset.images()).to(dtype)
    annotations = dataset.annotations()
    loss_cfg = LossConfig(train_cfg.alpha)
    baseline = train_cfg.baseline == BASELINE_MSE
    if baseline:
        hcfg = HeatmapConfig(gamma=train_cfg.gamma, activation=train_cfg.activation)
        targets = torch.from_numpy(
            baseline_targets(annotations, train_cfg.baseline_sigma, hcfg, Grid(*model_cfg.input_size))).to(dtype)

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    tlog = TrainLog(baseline=train_cfg.baseline)

    def checkpoint(step):
        if out_dir is not None:
            path = save_checkpoint(out_dir / f"step_{step:06d}", params, model_cfg,
                                   extra={"step": step, "train": train_cfg.to_dict()})
            tlog.checkpoints.append(path)

    checkpoint(0)
    rng = np.random.default_rng(train_cfg.seed)
    order, cursor = rng.permutation(len(dataset)), 0
    state = AdamState()
    start = time.perf_counter()
    bsz = min(train_cfg.batch_size, len(dataset))
    for step in range(1, train_cfg.steps + 1):
        if cursor + bsz > len(order):
            order, cursor = rng.permutation(len(dataset)), 0
        idx = np.sort(order[cursor:cursor + bsz])
        cursor += bsz

        out = model_forward(images[idx], params, model_cfg)
        try:
            if baseline:
                loss = torch.mean((out.heatmaps - targets[idx]) ** 2)
                record = StepRecord(step, loss.item(), mse=loss.item())
            else:
                loss, br = landmark_loss(out, annotations[idx], model_cfg.positivity_mode, loss_cfg,
                                         train_cfg.activation)
                record = StepRecord(step, br.total, br.mahalanobis_term, br.logdet_term)
        except DegenerateHeatmapError as exc:
            raise DivergenceError(f"step {step}: {exc}") from exc
        if not math.isfinite(record.loss):
            raise DivergenceError(f"step {step}: non-finite loss {record.loss}")
        # the baseline loss leaves the covariance branch unused
        grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
        grads = {k: torch.zeros_like(p) if g is None else g for (k, p), g in zip(params.items(), grads)}
        if not all(torch.isfinite(g).all() for g in grads.values()):
            raise DivergenceError(f"step {step}: non-finite gradient")
        adam_step(params, grads, state, train_cfg)
        record.wall_clock = time.perf_counter() - start
        tlog.records.append(record)
        if step % 100 == 0 or step == 1:
            log.info("step %d loss %.5f", step, record.loss)
        if (train_cfg.checkpoint_every and step % train_cfg.checkpoint_every == 0) or step == train_cfg.steps:
            checkpoint(step)
    if out_dir is not None:
        tlog.write_csv(out_dir / "train_log.csv")
    return {k: v.detach() for k, v in params.items()}, tlog
