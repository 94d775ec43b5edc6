"""Localisation metrics and predicted-covariance scoring.

MRE and SDR compare decoded predictions against ``gt_landmarks``. The
displacement analysis measures ``prediction - annotation`` per landmark over a
whole dataset (displacements are taken about the label, not about their own
mean) and compares that spread with the covariances the model predicts.
"""
from __future__ import annotations

import base64
import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .covariance import Covariance2x2, PositivityMode, ellipse_from_covariance, factors_from_raw, \
    principal_axes
from .heatmap import Activation, soft_argmax_values
from .network import ModelConfig, model_forward

DEFAULT_RADII_MM = (2.0, 2.5, 3.0, 4.0)
PD_JITTER = 1e-9


class InsufficientSamplesError(ValueError):
    pass


def _radial(preds, gts) -> np.ndarray:
    preds = np.asarray(preds, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64)
    if preds.shape != gts.shape or preds.shape[-1:] != (2,):
        raise ValueError(f"shape mismatch: preds {preds.shape} vs gts {gts.shape}")
    return np.sqrt(np.sum((preds - gts) ** 2, axis=-1))


def mre(preds, gts, spacing_mm: float = 1.0) -> float:
    if not spacing_mm > 0:
        raise ValueError("spacing_mm must be positive")
    r = _radial(preds, gts)
    return float(r.mean() * spacing_mm)


def sdr(preds, gts, radii_mm=DEFAULT_RADII_MM, spacing_mm: float = 1.0) -> dict[float, float]:
    """Percentage of detections strictly closer than each radius."""
    if not spacing_mm > 0 or any(not r > 0 for r in radii_mm):
        raise ValueError("spacing and radii must be positive")
    dist = _radial(preds, gts).reshape(-1) * spacing_mm
    return {float(r): 100.0 * np.count_nonzero(dist < r) / dist.size for r in radii_mm}


def empirical_covariance(displacements) -> Covariance2x2:
    d = np.asarray(displacements, dtype=np.float64)
    if d.ndim != 2 or d.shape[1] != 2:
        raise ValueError(f"displacements must be (M, 2), got {d.shape}")
    if d.shape[0] < 2:
        raise InsufficientSamplesError(f"need at least 2 displacements, got {d.shape[0]}")
    m = d.T @ d / d.shape[0]
    S = Covariance2x2.from_matrix(m)
    if not S.is_positive_definite:
        S = Covariance2x2(S.sxx + PD_JITTER, S.sxy, S.syy + PD_JITTER)
    return S


@dataclass(frozen=True)
class CovarianceAgreement:
    frobenius_rel: float
    angle_error_rad: float


def covariance_agreement(predicted: Covariance2x2, reference: Covariance2x2) -> CovarianceAgreement:
    P, R = predicted.as_matrix(), reference.as_matrix()
    frob = float(np.linalg.norm(P - R) / np.linalg.norm(R))
    lmax_r, lmin_r, ang_r = principal_axes(reference)
    if lmax_r - lmin_r <= 1e-12 * lmax_r:
        # isotropic reference: no dominant direction to compare against
        return CovarianceAgreement(frob, 0.0)
    _, _, ang_p = principal_axes(predicted)
    diff = abs(ang_p - ang_r) % math.pi
    return CovarianceAgreement(frob, float(min(diff, math.pi - diff)))


def predict(params: dict, cfg: ModelConfig, images: np.ndarray, activation=Activation.RELU,
            batch_size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Decoded coordinates (M, N, 2) and raw Cholesky outputs (M, N, 3)."""
    dtype = next(iter(params.values())).dtype
    preds, raws = [], []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            batch = torch.from_numpy(np.asarray(images[i:i + batch_size])).to(dtype)
            out = model_forward(batch, params, cfg)
            preds.append(soft_argmax_values(out.heatmaps.to(torch.float64).numpy(), activation))
            raws.append(out.raw_cholesky.to(torch.float64).numpy())
    if not preds:
        n = cfg.num_landmarks
        return np.zeros((0, n, 2)), np.zeros((0, n, 3))
    return np.concatenate(preds), np.concatenate(raws)


def covariances_from_raw(raws, mode: PositivityMode | str) -> np.ndarray:
    """Raw outputs (..., 3) -> (sxx, sxy, syy) arrays (..., 3)."""
    abc, _ = factors_from_raw(raws, mode)
    a, b, c = abc[..., 0], abc[..., 1], abc[..., 2]
    return np.stack([a * a, a * b, b * b + c * c], axis=-1)


def _cov(row) -> Covariance2x2:
    return Covariance2x2(*(float(v) for v in row))


@dataclass
class EvalReport:
    num_samples: int
    num_landmarks: int
    pixel_spacing_mm: float
    mre_mm: float
    mre_px: float
    sdr: dict
    per_landmark_mre: list
    covariance_agreement: list
    median_frobenius_rel: float | None
    median_angle_error_rad: float | None
    displacement_analysis: list

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sdr"] = {f"{float(k):g}": v for k, v in self.sdr.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def build_report(preds, raws, gts, annotations, mode, spacing_mm: float = 0.1,
                 true_covs=None, radii_mm=DEFAULT_RADII_MM) -> EvalReport:
    """Assemble metrics from decoded predictions and raw covariance outputs.

    ``true_covs`` (M, N, 3), when known, is the reference for the per-instance
    agreement scores; otherwise the per-landmark empirical displacement
    covariance is used.
    """
    preds, gts = np.asarray(preds, dtype=np.float64), np.asarray(gts, dtype=np.float64)
    annotations = np.asarray(annotations, dtype=np.float64)
    m, n = preds.shape[:2]
    if m < 1:
        raise ValueError("nothing to evaluate: no predictions")
    pred_covs = covariances_from_raw(raws, mode)
    per_lm = [mre(preds[:, i], gts[:, i], spacing_mm) for i in range(n)]

    displacement = []
    emp = []
    for i in range(n):
        entry = {"landmark": i, "mean_predicted_covariance": pred_covs[:, i].mean(axis=0).tolist()}
        if m >= 2:
            S_emp = empirical_covariance(preds[:, i] - annotations[:, i])
            emp.append(S_emp)
            agree = covariance_agreement(_cov(pred_covs[:, i].mean(axis=0)), S_emp)
            entry["empirical_covariance"] = [S_emp.sxx, S_emp.sxy, S_emp.syy]
            entry["agreement"] = asdict(agree)
        else:
            emp.append(None)
        displacement.append(entry)

    agreement, all_frob, all_ang = [], [], []
    for i in range(n):
        frobs, angs = [], []
        for s in range(m):
            if true_covs is not None:
                ref = _cov(true_covs[s][i])
            elif emp[i] is not None:
                ref = emp[i]
            else:
                continue
            a = covariance_agreement(_cov(pred_covs[s, i]), ref)
            frobs.append(a.frobenius_rel)
            angs.append(a.angle_error_rad)
        all_frob += frobs
        all_ang += angs
        agreement.append({
            "landmark": i,
            "reference": "true" if true_covs is not None else "empirical",
            "frobenius_rel": float(np.median(frobs)) if frobs else None,
            "angle_error_rad": float(np.median(angs)) if angs else None,
        })
    return EvalReport(
        num_samples=int(m),
        num_landmarks=int(n),
        pixel_spacing_mm=float(spacing_mm),
        mre_mm=mre(preds, gts, spacing_mm),
        mre_px=mre(preds, gts, 1.0),
        sdr=sdr(preds, gts, radii_mm, spacing_mm),
        per_landmark_mre=per_lm,
        covariance_agreement=agreement,
        median_frobenius_rel=float(np.median(all_frob)) if all_frob else None,
        median_angle_error_rad=float(np.median(all_ang)) if all_ang else None,
        displacement_analysis=displacement,
    )


def evaluate(params: dict, cfg: ModelConfig, dataset, activation=Activation.RELU,
             radii_mm=DEFAULT_RADII_MM) -> tuple[EvalReport, dict]:
    """Run the model over ``dataset``; return the report and the raw predictions."""
    if len(dataset) == 0:
        raise ValueError("nothing to evaluate: empty dataset")
    preds, raws = predict(params, cfg, dataset.images(), activation)
    gts, anns = dataset.landmarks(), dataset.annotations()
    true = None
    if all(s.true_cov is not None for s in dataset.samples):
        true = np.stack([s.true_cov_array() for s in dataset.samples])
    report = build_report(preds, raws, gts, anns, cfg.positivity_mode, dataset.pixel_spacing_mm, true, radii_mm)
    return report, {"preds": preds, "raws": raws, "covariances": covariances_from_raw(raws, cfg.positivity_mode)}


def _png_bytes(gray: np.ndarray) -> bytes:
    """Minimal 8-bit grayscale PNG encoder."""
    q = np.rint(np.clip(gray, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = q.shape
    raw = b"".join(b"\x00" + q[r].tobytes() for r in range(h))

    def chunk(tag, data):
        return struct.pack(">I", len(data)) + tag + data + struct.pack(">I", zlib.crc32(tag + data) & 0xFFFFFFFF)

    return (b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", struct.pack(">IIBBBBB", w, h, 8, 0, 0, 0, 0))
            + chunk(b"IDAT", zlib.compress(raw, 9)) + chunk(b"IEND", b""))


def _ellipse_svg(S: Covariance2x2, center, k: float, color: str, label: str) -> str:
    e = ellipse_from_covariance(S, center, k)
    cx, cy = e.center
    return (f'<ellipse class="{label}" cx="{cx:.4f}" cy="{cy:.4f}" rx="{e.semi_major:.4f}" '
            f'ry="{e.semi_minor:.4f}" transform="rotate({math.degrees(e.angle):.4f} {cx:.4f} {cy:.4f})" '
            f'fill="none" stroke="{color}" stroke-width="0.3"/>')


def overlay_svg(image, gt, pred, pred_covs, emp_covs=None, true_covs=None, k: float = 2.0) -> str:
    """SVG with the image, ground-truth and predicted points and k-sigma ellipses.

    Predicted ellipses are centred on the prediction; empirical and true ones on
    the ground truth.
    """
    h, w = image.shape
    href = "data:image/png;base64," + base64.b64encode(_png_bytes(image)).decode("ascii")
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{8 * w}" height="{8 * h}" '
             f'viewBox="0 0 {w} {h}">',
             f'<image x="0" y="0" width="{w}" height="{h}" href="{href}" style="image-rendering:pixelated"/>']
    for i in range(len(gt)):
        parts.append(_ellipse_svg(_cov(pred_covs[i]), pred[i], k, "yellow", "predicted"))
        if emp_covs is not None and emp_covs[i] is not None:
            parts.append(_ellipse_svg(_cov(emp_covs[i]), gt[i], k, "magenta", "empirical"))
        if true_covs is not None:
            parts.append(_ellipse_svg(_cov(true_covs[i]), gt[i], k, "lime", "true"))
        parts.append(f'<circle class="gt" cx="{gt[i][0]:.4f}" cy="{gt[i][1]:.4f}" r="0.6" fill="cyan"/>')
        parts.append(f'<circle class="pred" cx="{pred[i][0]:.4f}" cy="{pred[i][1]:.4f}" r="0.6" fill="yellow"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_overlays(directory, dataset, predictions: dict, report: EvalReport, k: float = 2.0) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    emp = [e.get("empirical_covariance") for e in report.displacement_analysis]
    paths = []
    for s, sample in enumerate(dataset.samples):
        svg = overlay_svg(sample.image, sample.gt_landmarks, predictions["preds"][s],
                          predictions["covariances"][s], emp, sample.true_cov_array(), k)
        path = directory / f"{s:06d}.svg"
        path.write_text(svg)
        paths.append(path)
    return paths
