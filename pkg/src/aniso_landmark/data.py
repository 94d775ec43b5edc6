"""Synthetic landmark scenes with known anisotropic annotation noise, and dataset I/O.

Each scene is a blurred bright ellipse on a dark, noisy background. Landmarks
sit on the ellipse boundary at equally spaced curve parameters. The annotation
of landmark ``i`` is ``gt_i + e`` with ``e ~ N(0, R diag(s_t^2, s_n^2) R^T)``,
where ``R`` rotates the x axis onto the boundary tangent at that landmark.

On-disk layout::

    DIR/manifest.json
    DIR/images/<id>.pgm           16-bit P5, values in [0, 1]
    DIR/landmarks/<id>.csv        x,y       noise-free positions
    DIR/annotations/<id>.csv      x,y       noisy labels used for training
    DIR/covariances/<id>.csv      sxx,sxy,syy  (synthetic data only)

Per-sample seeds are derived from a master seed with :func:`derive_seed`
(a splitmix64 finaliser applied to ``master + (index + 1) * golden_gamma``), so
sample ``i`` can be generated independently of all others.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from .covariance import Covariance2x2, decompose
from .pgm import PGMFormatError, encode_pgm, read_pgm

FORMAT_NAME = "aniso-landmark-dataset"
FORMAT_VERSION = 1
MARGIN_PX = 8.0
_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


class ConfigError(ValueError):
    pass


class DatasetFormatError(ValueError):
    pass


def splitmix64(x: int) -> int:
    z = (x + _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(master: int, index: int) -> int:
    return splitmix64((int(master) + int(index) * _GOLDEN) & _MASK64)


@dataclass(frozen=True)
class SceneConfig:
    image_size: tuple[int, int] = (64, 64)
    num_landmarks: int = 4
    center_jitter: float = 3.0
    semi_axis_x: tuple[float, float] = (16.0, 21.0)
    semi_axis_y: tuple[float, float] = (11.0, 16.0)
    rotation_range: float = 0.3
    arc_start: float = 0.0
    arc_end: float = math.pi
    edge_blur_sigma: float = 1.5
    noise_tangent_sigma: float = 3.0
    noise_normal_sigma: float = 1.0
    background_noise: float = 0.05
    pixel_spacing_mm: float = 0.1

    def __post_init__(self):
        for name in ("image_size", "semi_axis_x", "semi_axis_y"):
            object.__setattr__(self, name, tuple(float(v) if name != "image_size" else int(v)
                                                 for v in getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        h, w = self.image_size
        if h < 1 or w < 1 or self.num_landmarks < 1:
            raise ConfigError("image_size and num_landmarks must be positive")
        for name in ("semi_axis_x", "semi_axis_y"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ConfigError(f"{name} must be an increasing range of positive values")
        if not self.noise_tangent_sigma >= self.noise_normal_sigma > 0:
            raise ConfigError("need noise_tangent_sigma >= noise_normal_sigma > 0")
        if self.edge_blur_sigma <= 0 or self.background_noise < 0 or self.pixel_spacing_mm <= 0:
            raise ConfigError("edge_blur_sigma and pixel_spacing_mm must be positive, "
                              "background_noise non-negative")
        reach = self.center_jitter + max(self.semi_axis_x[1], self.semi_axis_y[1])
        if reach > min(h, w) / 2.0 - MARGIN_PX:
            raise ConfigError(f"ellipse reach {reach:.2f} px leaves less than {MARGIN_PX} px margin "
                              f"in a {h}x{w} image")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown scene config fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


@dataclass(frozen=True)
class Sample:
    image: np.ndarray = field(repr=False)
    gt_landmarks: np.ndarray
    annotation: np.ndarray
    true_cov: tuple[Covariance2x2, ...] | None = None
    seed: int = 0

    @property
    def num_landmarks(self) -> int:
        return len(self.gt_landmarks)

    def true_cov_array(self) -> np.ndarray | None:
        if self.true_cov is None:
            return None
        return np.array([[c.sxx, c.sxy, c.syy] for c in self.true_cov])


def sample_gaussian_2d(S: Covariance2x2, seed=None, size: int | None = None) -> np.ndarray:
    """Zero-mean draws with covariance ``S``, via ``C z`` for ``z ~ N(0, I)``.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    C = decompose(S).as_matrix()
    z = rng.standard_normal(2 if size is None else (size, 2))
    return z @ C.T


def _render_scene(cfg: SceneConfig, center, axes, theta, rng) -> np.ndarray:
    h, w = cfg.image_size
    xs = np.arange(w) + 0.5
    ys = np.arange(h) + 0.5
    X, Y = np.meshgrid(xs, ys)
    ct, st = math.cos(theta), math.sin(theta)
    dx, dy = X - center[0], Y - center[1]
    u = ct * dx + st * dy
    v = -st * dx + ct * dy
    A, B = axes
    rho = np.sqrt((u / A) ** 2 + (v / B) ** 2)
    grad = np.sqrt((u / A**2) ** 2 + (v / B**2) ** 2) / np.maximum(rho, 1e-9)
    # first-order signed distance to the boundary, negative inside
    dist = np.where(rho > 1e-9, (rho - 1.0) / np.maximum(grad, 1e-9), -min(A, B))
    img = 0.15 + 0.7 * ndtr(-dist / cfg.edge_blur_sigma)
    if cfg.background_noise > 0:
        img = img + cfg.background_noise * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def landmark_geometry(cfg: SceneConfig, center, axes, theta) -> tuple[np.ndarray, np.ndarray]:
    """Landmark positions and unit tangents on the ellipse boundary."""
    n = cfg.num_landmarks
    t = cfg.arc_start + (np.arange(n) + 0.5) * (cfg.arc_end - cfg.arc_start) / n
    A, B = axes
    ct, st = math.cos(theta), math.sin(theta)
    rot = np.array([[ct, -st], [st, ct]])
    local = np.stack([A * np.cos(t), B * np.sin(t)], axis=1)
    tang = np.stack([-A * np.sin(t), B * np.cos(t)], axis=1)
    pts = local @ rot.T + np.asarray(center)
    tang = tang @ rot.T
    tang /= np.linalg.norm(tang, axis=1, keepdims=True)
    return pts, tang


def tangent_covariance(tangent, sigma_t: float, sigma_n: float) -> Covariance2x2:
    tx, ty = tangent
    # R = [[tx, -ty], [ty, tx]];  R diag(st^2, sn^2) R^T
    vt, vn = sigma_t**2, sigma_n**2
    return Covariance2x2(vt * tx * tx + vn * ty * ty, (vt - vn) * tx * ty, vt * ty * ty + vn * tx * tx)


def generate_sample(cfg: SceneConfig, seed: int) -> Sample:
    rng = np.random.default_rng(int(seed) & _MASK64)
    h, w = cfg.image_size
    center = np.array([w / 2.0, h / 2.0]) + rng.uniform(-cfg.center_jitter, cfg.center_jitter, 2)
    axes = (rng.uniform(*cfg.semi_axis_x), rng.uniform(*cfg.semi_axis_y))
    theta = rng.uniform(-cfg.rotation_range, cfg.rotation_range)
    image = _render_scene(cfg, center, axes, theta, rng)
    pts, tang = landmark_geometry(cfg, center, axes, theta)
    if np.any(pts < MARGIN_PX) or np.any(pts[:, 0] > w - MARGIN_PX) or np.any(pts[:, 1] > h - MARGIN_PX):
        raise ConfigError(f"seed {seed}: landmark closer than {MARGIN_PX} px to the border")
    covs = tuple(tangent_covariance(t, cfg.noise_tangent_sigma, cfg.noise_normal_sigma) for t in tang)
    noise = np.stack([sample_gaussian_2d(c, rng) for c in covs])
    return Sample(image=image, gt_landmarks=pts, annotation=pts + noise, true_cov=covs, seed=int(seed))


def generate_dataset(cfg: SceneConfig, count: int, master_seed: int) -> list[Sample]:
    return [generate_sample(cfg, derive_seed(master_seed, i)) for i in range(count)]


@dataclass
class Dataset:
    samples: list[Sample]
    image_size: tuple[int, int]
    num_landmarks: int
    pixel_spacing_mm: float = 0.1

    def __len__(self) -> int:
        return len(self.samples)

    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.samples])

    def annotations(self) -> np.ndarray:
        return np.stack([s.annotation for s in self.samples])

    def landmarks(self) -> np.ndarray:
        return np.stack([s.gt_landmarks for s in self.samples])


def _format_rows(header: list[str], rows) -> str:
    lines = [",".join(header)]
    lines += [",".join(f"{float(v):.6f}" for v in row) for row in rows]
    return "\n".join(lines) + "\n"


def _parse_rows(path: Path, header: list[str], count: int) -> np.ndarray:
    try:
        text = path.read_text()
    except OSError as exc:
        raise DatasetFormatError(f"{path}: cannot read ({exc.strerror})") from exc
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or [c.strip() for c in rows[0]] != header:
        raise DatasetFormatError(f"{path}:1: expected header {','.join(header)}")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DatasetFormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            vals = [float(c) for c in row]
        except ValueError:
            raise DatasetFormatError(f"{path}:{lineno}: non-numeric field in {row!r}") from None
        if not all(math.isfinite(v) for v in vals):
            raise DatasetFormatError(f"{path}:{lineno}: non-finite value")
        out.append(vals)
    if len(out) != count:
        raise DatasetFormatError(f"{path}: expected {count} rows, found {len(out)}")
    return np.array(out, dtype=np.float64).reshape(count, len(header))


def write_dataset(samples, directory, pixel_spacing_mm: float = 0.1, image_size=None,
                  num_landmarks: int | None = None, scene: SceneConfig | None = None) -> Path:
    directory = Path(directory)
    samples = list(samples)
    if samples:
        image_size = tuple(samples[0].image.shape)
        num_landmarks = samples[0].num_landmarks
    elif image_size is None or num_landmarks is None:
        if scene is None:
            raise ValueError("empty dataset needs image_size and num_landmarks (or a scene config)")
        image_size, num_landmarks = scene.image_size, scene.num_landmarks
    for sub in ("images", "landmarks", "annotations", "covariances"):
        (directory / sub).mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        if s.image.shape != tuple(image_size) or s.num_landmarks != num_landmarks:
            raise ValueError(f"sample {i} does not match dataset shape")
        sid = f"{i:06d}"
        entry = {"id": sid, "seed": int(s.seed), "image": f"images/{sid}.pgm",
                 "landmarks": f"landmarks/{sid}.csv", "annotations": f"annotations/{sid}.csv"}
        (directory / entry["image"]).write_bytes(encode_pgm(s.image))
        (directory / entry["landmarks"]).write_text(_format_rows(["x", "y"], s.gt_landmarks))
        (directory / entry["annotations"]).write_text(_format_rows(["x", "y"], s.annotation))
        if s.true_cov is not None:
            entry["covariances"] = f"covariances/{sid}.csv"
            (directory / entry["covariances"]).write_text(
                _format_rows(["sxx", "sxy", "syy"], s.true_cov_array()))
        entries.append(entry)
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "image_size": [int(v) for v in image_size],
        "num_landmarks": int(num_landmarks),
        "num_samples": len(samples),
        "pixel_spacing_mm": float(pixel_spacing_mm),
        "coordinates": "pixel centers at (col + 0.5, row + 0.5); x right, y down",
        "samples": entries,
    }
    if scene is not None:
        manifest["scene"] = scene.to_dict()
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def read_dataset(directory) -> Dataset:
    directory = Path(directory)
    mpath = directory / "manifest.json"
    try:
        text = mpath.read_text()
    except OSError as exc:
        raise DatasetFormatError(f"{mpath}: cannot read ({exc.strerror})") from exc
    try:
        manifest = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{mpath}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    if manifest.get("format") != FORMAT_NAME:
        raise DatasetFormatError(f"{mpath}: unknown format {manifest.get('format')!r}")
    try:
        h, w = (int(v) for v in manifest["image_size"])
        n = int(manifest["num_landmarks"])
        spacing = float(manifest.get("pixel_spacing_mm", 0.1))
        entries = manifest["samples"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetFormatError(f"{mpath}: missing or invalid field ({exc})") from None
    if "num_samples" in manifest and manifest["num_samples"] != len(entries):
        raise DatasetFormatError(f"{mpath}: num_samples {manifest['num_samples']} != {len(entries)} entries")
    samples = []
    for entry in entries:
        ipath = directory / entry["image"]
        try:
            image = read_pgm(ipath)
        except OSError as exc:
            raise DatasetFormatError(f"{ipath}: cannot read ({exc.strerror})") from exc
        except PGMFormatError as exc:
            raise DatasetFormatError(str(exc)) from exc
        if image.shape != (h, w):
            raise DatasetFormatError(f"{ipath}: image is {image.shape}, manifest says {(h, w)}")
        gt = _parse_rows(directory / entry["landmarks"], ["x", "y"], n)
        ann_rel = entry.get("annotations")
        ann = _parse_rows(directory / ann_rel, ["x", "y"], n) if ann_rel else gt.copy()
        covs = None
        if entry.get("covariances"):
            arr = _parse_rows(directory / entry["covariances"], ["sxx", "sxy", "syy"], n)
            covs = tuple(Covariance2x2(*map(float, row)) for row in arr)
        samples.append(Sample(image=image, gt_landmarks=gt, annotation=ann, true_cov=covs,
                              seed=int(entry.get("seed", 0))))
    return Dataset(samples, (h, w), n, spacing)
