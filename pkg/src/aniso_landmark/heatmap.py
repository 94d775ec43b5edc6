"""Gaussian target heatmaps and weighted-spatial-mean (soft-argmax) decoding.

Coordinates follow the pixel-center convention used throughout the package:
pixel ``(row, col)`` sits at ``(x, y) = (col + 0.5, row + 0.5)``, x horizontal.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .covariance import Covariance2x2, DefinitenessError

MIN_MASS = 1e-12


class DegenerateHeatmapError(ValueError):
    """The activated heatmap has (almost) no mass, so its mean is undefined."""


class Activation(str, Enum):
    RELU = "relu"
    EXP_SOFTMAX = "exp-softmax"
    # max(v, 0) like relu, but the derivative is 1 on the closed half-line v >= 0
    IDENTITY_CLAMPED = "identity-clamped"


@dataclass(frozen=True)
class Grid:
    height: int
    width: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError(f"grid must be at least 1x1, got {self.height}x{self.width}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def coordinates(self) -> tuple[np.ndarray, np.ndarray]:
        """Pixel-center x and y arrays, each of shape (height, width)."""
        xs = np.arange(self.width, dtype=np.float64) + 0.5
        ys = np.arange(self.height, dtype=np.float64) + 0.5
        return np.meshgrid(xs, ys, indexing="xy")

    @property
    def centroid(self) -> np.ndarray:
        return np.array([self.width / 2.0, self.height / 2.0])


@dataclass(frozen=True)
class HeatmapConfig:
    gamma: float = 1000.0
    activation: Activation = Activation.RELU

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        object.__setattr__(self, "activation", Activation(self.activation))


@dataclass(frozen=True)
class Heatmap:
    grid: Grid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != self.grid.shape:
            raise ValueError(f"values shape {values.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("heatmap values must be finite")
        object.__setattr__(self, "values", values)


def render_isotropic(center, sigma: float, cfg: HeatmapConfig, grid: Grid) -> Heatmap:
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    cx, cy = (float(v) for v in center)
    xs, ys = grid.coordinates()
    d2 = (xs - cx) ** 2 + (ys - cy) ** 2
    peak = cfg.gamma / (2.0 * math.pi * sigma * sigma)
    return Heatmap(grid, peak * np.exp(-d2 / (2.0 * sigma * sigma)))


def render_anisotropic(center, cov: Covariance2x2, cfg: HeatmapConfig, grid: Grid) -> Heatmap:
    if not cov.is_positive_definite:
        raise DefinitenessError(f"not positive definite: {cov}")
    cx, cy = (float(v) for v in center)
    xs, ys = grid.coordinates()
    dx, dy = xs - cx, ys - cy
    inv = cov.inverse
    maha = inv[0, 0] * dx * dx + 2.0 * inv[0, 1] * dx * dy + inv[1, 1] * dy * dy
    peak = cfg.gamma / (2.0 * math.pi * math.exp(0.5 * cov.logdet))
    return Heatmap(grid, peak * np.exp(-0.5 * maha))


def activate(values: np.ndarray, activation: Activation | str) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(delta(v), delta'(v))`` elementwise.

    For ``exp-softmax`` the values are shifted by their per-map maximum first;
    the decoded mean is unaffected by the shift.
    """
    activation = Activation(activation)
    if activation is Activation.EXP_SOFTMAX:
        p = np.exp(values - values.max(axis=(-2, -1), keepdims=True))
        return p, p
    p = np.maximum(values, 0.0)
    if activation is Activation.RELU:
        return p, (values > 0).astype(np.float64)
    return p, (values >= 0).astype(np.float64)


def soft_argmax_values(values, activation: Activation | str = Activation.RELU) -> np.ndarray:
    """Decode a stack of maps of shape ``(..., H, W)`` into ``(..., 2)`` (x, y) coordinates."""
    values = np.asarray(values, dtype=np.float64)
    h, w = values.shape[-2:]
    xs, ys = Grid(h, w).coordinates()
    p, _ = activate(values, activation)
    mass = p.sum(axis=(-2, -1))
    if np.any(mass <= MIN_MASS):
        raise DegenerateHeatmapError(f"activated heatmap mass {mass.min():.3g} <= {MIN_MASS}")
    x = (p * xs).sum(axis=(-2, -1)) / mass
    y = (p * ys).sum(axis=(-2, -1)) / mass
    return np.stack([x, y], axis=-1)


def soft_argmax_vjp(values, grad_coords, activation: Activation | str = Activation.RELU) -> np.ndarray:
    """Pull back a gradient on decoded coordinates to the heatmap values.

    With ``p = delta(v)``, ``m = sum p`` and mean ``u``::

        d u / d v_j = delta'(v_j) * (x_j - u) / m
    """
    values = np.asarray(values, dtype=np.float64)
    grad_coords = np.asarray(grad_coords, dtype=np.float64)
    h, w = values.shape[-2:]
    xs, ys = Grid(h, w).coordinates()
    p, dp = activate(values, activation)
    mass = p.sum(axis=(-2, -1), keepdims=True)
    if np.any(mass <= MIN_MASS):
        raise DegenerateHeatmapError(f"activated heatmap mass {mass.min():.3g} <= {MIN_MASS}")
    ux = (p * xs).sum(axis=(-2, -1), keepdims=True) / mass
    uy = (p * ys).sum(axis=(-2, -1), keepdims=True) / mass
    gx = grad_coords[..., 0, None, None]
    gy = grad_coords[..., 1, None, None]
    return dp * (gx * (xs - ux) + gy * (ys - uy)) / mass


def soft_argmax(H: Heatmap, cfg: HeatmapConfig = HeatmapConfig()) -> np.ndarray:
    return soft_argmax_values(H.values, cfg.activation)


def soft_argmax_jacobian(H: Heatmap, cfg: HeatmapConfig = HeatmapConfig()) -> np.ndarray:
    """Full Jacobian of the decoded (x, y) w.r.t. every heatmap value, shape (2, H, W)."""
    eye = np.eye(2)
    return np.stack([soft_argmax_vjp(H.values, eye[k], cfg.activation) for k in range(2)])
