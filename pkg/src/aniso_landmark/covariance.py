"""2x2 covariance algebra built around the lower-triangular Cholesky factor.

A factor ``C = [[a, 0], [b, c]]`` maps to ``Sigma = C @ C.T``:

    sxx = a**2,  sxy = a*b,  syy = b**2 + c**2

The network emits three unconstrained reals per landmark. ``cholesky_from_raw``
turns them into a valid factor through the piecewise positivity map
``f(x) = x + 1 (x >= 0), exp(x) (x < 0)``.

Two positivity modes are supported:

* ``paper-faithful``: ``f`` on all of a, b, c. Only non-negative x-y
  correlation is representable (``sxy = a*b >= 0``).
* ``diag-only``: ``f`` on a and c, b left free. Any SPD matrix is reachable.

Everything is float64.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from functools import cached_property

import numpy as np

MIN_DIAG = 1e-6


class DefinitenessError(ValueError):
    """Raised when a matrix that must be positive definite is not."""


class PositivityMode(str, Enum):
    PAPER_FAITHFUL = "paper-faithful"
    DIAG_ONLY = "diag-only"


def _as_mode(mode: PositivityMode | str) -> PositivityMode:
    return mode if isinstance(mode, PositivityMode) else PositivityMode(mode)


@dataclass(frozen=True)
class CholeskyFactor:
    a: float
    b: float
    c: float

    def __post_init__(self):
        if not (self.a > 0 and self.c > 0):
            raise ValueError(f"Cholesky diagonal must be positive, got a={self.a}, c={self.c}")

    def as_matrix(self) -> np.ndarray:
        return np.array([[self.a, 0.0], [self.b, self.c]])


@dataclass(frozen=True)
class Covariance2x2:
    """Symmetric 2x2 matrix stored as its three free entries (px^2).

    Construction does not enforce definiteness so that callers such as
    :func:`decompose` can report it; use :attr:`is_positive_definite`.
    """

    sxx: float
    sxy: float
    syy: float

    @classmethod
    def from_matrix(cls, m) -> "Covariance2x2":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (2, 2):
            raise ValueError(f"expected a 2x2 matrix, got shape {m.shape}")
        return cls(float(m[0, 0]), float(0.5 * (m[0, 1] + m[1, 0])), float(m[1, 1]))

    def as_matrix(self) -> np.ndarray:
        return np.array([[self.sxx, self.sxy], [self.sxy, self.syy]])

    @property
    def det(self) -> float:
        return self.sxx * self.syy - self.sxy * self.sxy

    @property
    def is_positive_definite(self) -> bool:
        return self.sxx > 0 and self.det > 0

    @cached_property
    def factor(self) -> CholeskyFactor:
        return decompose(self)

    @cached_property
    def inverse(self) -> np.ndarray:
        return inverse_and_logdet(self.factor)[0]

    @cached_property
    def logdet(self) -> float:
        return inverse_and_logdet(self.factor)[1]


@dataclass(frozen=True)
class EllipseParams:
    center: tuple[float, float]
    semi_major: float
    semi_minor: float
    angle: float


def positivity_map(x):
    """``x + 1`` for ``x >= 0`` and ``exp(x)`` otherwise. Works elementwise on arrays."""
    x = np.asarray(x, dtype=np.float64)
    out = np.where(x >= 0, x + 1.0, np.exp(np.minimum(x, 0.0)))
    return float(out) if out.ndim == 0 else out


def positivity_map_grad(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.where(x >= 0, 1.0, np.exp(np.minimum(x, 0.0)))
    return float(out) if out.ndim == 0 else out


def factors_from_raw(raw, mode: PositivityMode | str = PositivityMode.PAPER_FAITHFUL):
    """Vectorised raw -> (a, b, c) map.

    Args:
        raw: array of shape ``(..., 3)``.
        mode: positivity mode.

    Returns:
        ``(abc, dabc)`` where ``abc`` has the shape of ``raw`` and ``dabc`` holds
        the elementwise derivative d(abc)/d(raw) (the map is diagonal). The
        diagonal entries are clamped to ``MIN_DIAG``; where the clamp is active
        the derivative is zero.
    """
    mode = _as_mode(mode)
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[-1] != 3:
        raise ValueError(f"raw Cholesky outputs need a trailing axis of 3, got {raw.shape}")
    abc = positivity_map(raw)
    dabc = positivity_map_grad(raw)
    abc = np.array(abc, dtype=np.float64, ndmin=1).reshape(raw.shape)
    dabc = np.array(dabc, dtype=np.float64, ndmin=1).reshape(raw.shape)
    if mode is PositivityMode.DIAG_ONLY:
        abc[..., 1] = raw[..., 1]
        dabc[..., 1] = 1.0
    for k in (0, 2):
        clamped = abc[..., k] < MIN_DIAG
        abc[..., k] = np.where(clamped, MIN_DIAG, abc[..., k])
        dabc[..., k] = np.where(clamped, 0.0, dabc[..., k])
    return abc, dabc


def cholesky_from_raw(raw, mode: PositivityMode | str = PositivityMode.PAPER_FAITHFUL) -> CholeskyFactor:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != (3,):
        raise ValueError(f"expected a 3-vector, got shape {raw.shape}")
    if not np.all(np.isfinite(raw)):
        raise ValueError("raw Cholesky outputs must be finite")
    abc, _ = factors_from_raw(raw, mode)
    return CholeskyFactor(*map(float, abc))


def reconstruct(C: CholeskyFactor) -> Covariance2x2:
    return Covariance2x2(C.a * C.a, C.a * C.b, C.b * C.b + C.c * C.c)


def decompose(S: Covariance2x2) -> CholeskyFactor:
    if not S.sxx > 0:
        raise DefinitenessError(f"not positive definite: sxx={S.sxx}")
    a = math.sqrt(S.sxx)
    b = S.sxy / a
    rem = S.syy - b * b
    if not rem > 0:
        raise DefinitenessError(f"not positive definite: det={S.det}")
    return CholeskyFactor(a, b, math.sqrt(rem))


def inverse_and_logdet(C: CholeskyFactor) -> tuple[np.ndarray, float]:
    """Return ``(Sigma^-1, log|Sigma|)`` for ``Sigma = C C^T``.

    The inverse is assembled as ``C^-T C^-1`` from the closed-form inverse of
    the triangular factor, so Sigma itself is never inverted.
    """
    a, b, c = C.a, C.b, C.c
    # C^-1 = [[1/a, 0], [-b/(a c), 1/c]]
    linv = np.array([[1.0 / a, 0.0], [-b / (a * c), 1.0 / c]])
    inv = linv.T @ linv
    return inv, 2.0 * (math.log(a) + math.log(c))


def _eig_sym2(sxx: float, sxy: float, syy: float) -> tuple[float, float, float]:
    """Closed-form eigen-decomposition: (lambda_max, lambda_min, angle of major axis)."""
    mean = 0.5 * (sxx + syy)
    half_diff = 0.5 * (sxx - syy)
    rad = math.hypot(half_diff, sxy)
    lmax = mean + rad
    # det / lmax avoids cancellation in mean - rad for elongated matrices
    lmin = (sxx * syy - sxy * sxy) / lmax if lmax > 0 else mean - rad
    if rad <= 1e-12 * abs(mean):
        return lmax, lmin, 0.0
    # atan2 lies in (-pi, pi], so the half angle lies in (-pi/2, pi/2]
    return lmax, lmin, 0.5 * math.atan2(2.0 * sxy, sxx - syy)


def principal_axes(S: Covariance2x2) -> tuple[float, float, float]:
    return _eig_sym2(S.sxx, S.sxy, S.syy)


def ellipse_from_covariance(S: Covariance2x2, center, k: float = 1.0) -> EllipseParams:
    if not k > 0:
        raise ValueError("k must be positive")
    if not S.is_positive_definite:
        raise DefinitenessError(f"not positive definite: {S}")
    lmax, lmin, angle = principal_axes(S)
    cx, cy = (float(v) for v in center)
    return EllipseParams((cx, cy), k * math.sqrt(lmax), k * math.sqrt(max(lmin, 0.0)), angle)
