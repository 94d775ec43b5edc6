"""Uncertainty-aware landmark loss.

Per landmark, with residual ``r = pred - gt`` and predicted ``Sigma = C C^T``::

    L = r^T Sigma^-1 r + alpha * log|Sigma|

The Mahalanobis term is evaluated as ``||C^-1 r||^2`` by forward substitution.
Gradients are closed-form: with ``u = C^-1 r`` and ``w = C^-T u``,

    dL/dr = 2 w
    dL/da = -2 u0 w0 + 2 alpha / a
    dL/db = -2 u0 w1
    dL/dc = -2 u1 w1 + 2 alpha / c

and are chained through the positivity map to the raw network outputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .covariance import CholeskyFactor, PositivityMode, factors_from_raw


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.1

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ValueError("alpha must be non-negative")


@dataclass(frozen=True)
class LossBreakdown:
    """Mean-reduced loss and its parts.

    ``total == mahalanobis_term + alpha * logdet_term == mean(per_landmark)``.
    """

    mahalanobis_term: float
    logdet_term: float
    total: float
    per_landmark: list[float]


def _terms(r, abc, alpha):
    """Vectorised per-landmark terms and gradients. ``r``: (..., 2), ``abc``: (..., 3)."""
    a, b, c = abc[..., 0], abc[..., 1], abc[..., 2]
    u0 = r[..., 0] / a
    u1 = (r[..., 1] - b * u0) / c
    w1 = u1 / c
    w0 = (u0 - b * w1) / a
    mahal = u0 * u0 + u1 * u1
    logdet = 2.0 * (np.log(a) + np.log(c))
    d_r = np.stack([2.0 * w0, 2.0 * w1], axis=-1)
    d_abc = np.stack(
        [-2.0 * u0 * w0 + 2.0 * alpha / a, -2.0 * u0 * w1, -2.0 * u1 * w1 + 2.0 * alpha / c],
        axis=-1,
    )
    return mahal, logdet, d_r, d_abc


def nll_loss(pred, gt, C: CholeskyFactor, cfg: LossConfig = LossConfig()) -> float:
    r = np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64)
    abc = np.array([C.a, C.b, C.c])
    mahal, logdet, _, _ = _terms(r, abc, cfg.alpha)
    return float(mahal + cfg.alpha * logdet)


def nll_loss_grad(pred, gt, raw, mode: PositivityMode | str = PositivityMode.PAPER_FAITHFUL,
                  cfg: LossConfig = LossConfig()) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of :func:`nll_loss` w.r.t. ``pred`` and the raw (pre-positivity) outputs."""
    r = np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64)
    abc, dabc = factors_from_raw(raw, mode)
    _, _, d_r, d_abc = _terms(r, abc, cfg.alpha)
    return d_r, d_abc * dabc


def batch_loss_and_grad(preds, gts, raws, mode: PositivityMode | str = PositivityMode.PAPER_FAITHFUL,
                        cfg: LossConfig = LossConfig()):
    """Mean loss over every landmark instance, plus gradients of that mean.

    ``preds``/``gts`` have shape ``(..., 2)`` and ``raws`` ``(..., 3)`` with
    matching leading shapes. Returns ``(LossBreakdown, d_preds, d_raws)``.
    """
    preds = np.asarray(preds, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64)
    raws = np.asarray(raws, dtype=np.float64)
    if preds.shape != gts.shape or preds.shape[:-1] != raws.shape[:-1] \
            or preds.shape[-1:] != (2,) or raws.shape[-1:] != (3,):
        raise ValueError(
            f"length mismatch: preds {preds.shape}, gts {gts.shape}, raws {raws.shape}")
    count = int(np.prod(preds.shape[:-1]))
    if count < 1:
        raise ValueError("batch_loss needs at least one landmark")
    abc, dabc = factors_from_raw(raws, mode)
    mahal, logdet, d_r, d_abc = _terms(preds - gts, abc, cfg.alpha)
    per = mahal + cfg.alpha * logdet
    flat = per.reshape(-1)
    # fixed-order reduction for reproducibility
    total = float(np.sum(flat) / count)
    breakdown = LossBreakdown(
        mahalanobis_term=float(np.sum(mahal) / count),
        logdet_term=float(np.sum(logdet) / count),
        total=total,
        per_landmark=[float(v) for v in flat],
    )
    return breakdown, d_r / count, d_abc * dabc / count


def batch_loss(preds, gts, raws, mode: PositivityMode | str = PositivityMode.PAPER_FAITHFUL,
               cfg: LossConfig = LossConfig()) -> LossBreakdown:
    return batch_loss_and_grad(preds, gts, raws, mode, cfg)[0]
