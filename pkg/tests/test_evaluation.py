import json
import math
import xml.etree.ElementTree as ET
import zlib

import jsonschema
import numpy as np
import pytest
from hypothesis import given, strategies as st

from aniso_landmark.cli import load_schema
from aniso_landmark.covariance import Covariance2x2, cholesky_from_raw, ellipse_from_covariance, reconstruct
from aniso_landmark.data import sample_gaussian_2d
from aniso_landmark.evaluation import (
    CovarianceAgreement,
    InsufficientSamplesError,
    _png_bytes,
    build_report,
    covariance_agreement,
    covariances_from_raw,
    empirical_covariance,
    mre,
    overlay_svg,
    sdr,
)


def rot(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def test_mre_examples():
    assert mre([[3.0, 4.0]], [[0.0, 0.0]], 0.1) == pytest.approx(0.5)
    assert mre(np.ones((3, 2, 2)), np.ones((3, 2, 2)), 0.1) == 0.0
    assert mre([[1.0, 0.0], [0.0, 3.0]], [[0.0, 0.0], [0.0, 0.0]], 0.1) == pytest.approx(0.2)
    with pytest.raises(ValueError):
        mre(np.zeros((2, 2)), np.zeros((3, 2)))


def test_sdr_examples():
    preds = np.array([[19.0, 0.0], [21.0, 0.0]])
    gts = np.zeros((2, 2))
    assert sdr(preds, gts, [2.0], 0.1) == {2.0: 50.0}
    assert sdr(gts, gts, spacing_mm=0.1) == {2.0: 100.0, 2.5: 100.0, 3.0: 100.0, 4.0: 100.0}
    # boundary-equal counts as a miss
    assert sdr([[20.0, 0.0]], [[0.0, 0.0]], [2.0], 0.1)[2.0] == 0.0


def test_metrics_against_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(100):
        m, n = rng.integers(1, 6), rng.integers(1, 5)
        preds, gts = rng.uniform(0, 64, (m, n, 2)), rng.uniform(0, 64, (m, n, 2))
        spacing = rng.uniform(0.05, 1.0)
        dists = [math.hypot(*(preds[i, j] - gts[i, j])) * spacing for i in range(m) for j in range(n)]
        assert abs(mre(preds, gts, spacing) - sum(dists) / len(dists)) < 1e-12
        radii = sorted(rng.uniform(0.5, 40, 4))
        res = sdr(preds, gts, radii, spacing)
        for r in radii:
            assert res[r] == 100.0 * sum(1 for d in dists if d < r) / len(dists)
        vals = [res[r] for r in radii]
        assert vals == sorted(vals)


@given(st.floats(-100, 100), st.floats(-100, 100), st.floats(0.01, 5))
def test_mre_translation_invariance_and_spacing_linearity(tx, ty, spacing):
    rng = np.random.default_rng(1)
    preds, gts = rng.normal(size=(4, 3, 2)), rng.normal(size=(4, 3, 2))
    t = np.array([tx, ty])
    assert mre(preds + t, gts + t, spacing) == pytest.approx(mre(preds, gts, spacing), rel=1e-9, abs=1e-12)
    assert mre(preds, gts, spacing) == pytest.approx(spacing * mre(preds, gts, 1.0), rel=1e-12)


def test_empirical_covariance_examples():
    S = empirical_covariance([[1, 0], [-1, 0]])
    assert (S.sxx, S.sxy) == (pytest.approx(1.0), 0.0)
    assert 0 < S.syy < 1e-8 and S.is_positive_definite
    S = empirical_covariance([[1, 1], [-1, -1], [1, -1], [-1, 1]])
    np.testing.assert_array_equal(S.as_matrix(), np.eye(2))
    with pytest.raises(InsufficientSamplesError):
        empirical_covariance([[1, 2]])


def test_empirical_covariance_outer_product_oracle():
    rng = np.random.default_rng(2)
    for _ in range(50):
        d = rng.normal(size=(int(rng.integers(2, 40)), 2)) * rng.uniform(0.1, 5)
        brute = sum(np.outer(v, v) for v in d) / len(d)
        np.testing.assert_allclose(empirical_covariance(d).as_matrix(), brute, rtol=1e-12, atol=1e-12)


def test_empirical_covariance_monte_carlo():
    S = Covariance2x2(9.0, 2.5, 2.0)
    d = sample_gaussian_2d(S, 0, size=100_000)
    E = empirical_covariance(d).as_matrix()
    assert np.linalg.norm(E - S.as_matrix()) / np.linalg.norm(S.as_matrix()) < 0.05


def test_agreement_examples():
    S = Covariance2x2(4.0, 1.0, 2.0)
    assert covariance_agreement(S, S) == CovarianceAgreement(0.0, 0.0)
    a = covariance_agreement(Covariance2x2(4, 0, 1), Covariance2x2(1, 0, 4))
    assert a.angle_error_rad == pytest.approx(math.pi / 2)
    assert a.frobenius_rel == pytest.approx(math.sqrt(18) / math.sqrt(17))
    R = rot(math.radians(10))
    rotated = Covariance2x2.from_matrix(R @ np.diag([4.0, 1.0]) @ R.T)
    a = covariance_agreement(Covariance2x2(4, 0, 1), rotated)
    assert abs(a.angle_error_rad - math.radians(10)) < 1e-9


def test_agreement_isotropic_reference_and_folding():
    a = covariance_agreement(Covariance2x2(4, 0, 1), Covariance2x2(2, 0, 2))
    assert a.angle_error_rad == 0.0
    for deg in (0, 30, 89, 91, 150, 179, 181):
        R = rot(math.radians(deg))
        P = Covariance2x2.from_matrix(R @ np.diag([5.0, 1.0]) @ R.T)
        err = covariance_agreement(P, Covariance2x2(5, 0, 1)).angle_error_rad
        expected = math.radians(min(deg % 180, 180 - deg % 180))
        assert 0 <= err <= math.pi / 2
        assert err == pytest.approx(expected, abs=1e-9)


def test_covariances_from_raw_matches_reconstruct():
    raws = np.random.default_rng(3).normal(size=(5, 3, 3))
    for mode in ("paper-faithful", "diag-only"):
        covs = covariances_from_raw(raws, mode)
        for idx in np.ndindex(5, 3):
            S = reconstruct(cholesky_from_raw(raws[idx], mode))
            np.testing.assert_allclose(covs[idx], [S.sxx, S.sxy, S.syy], rtol=1e-14)


def make_report(m=6, n=2, true=True, seed=0):
    rng = np.random.default_rng(seed)
    gts = rng.uniform(10, 50, (m, n, 2))
    anns = gts + rng.normal(size=(m, n, 2))
    preds = gts + rng.normal(scale=0.5, size=(m, n, 2))
    raws = rng.normal(size=(m, n, 3))
    true_covs = np.tile([4.0, 1.0, 2.0], (m, n, 1)) if true else None
    return build_report(preds, raws, gts, anns, "diag-only", 0.1, true_covs), (preds, raws, gts, anns, true_covs)


def test_report_contents_and_schema():
    report, (preds, raws, gts, anns, true_covs) = make_report()
    d = json.loads(report.to_json())
    jsonschema.validate(d, load_schema("eval_report.schema.json"))
    assert d["num_samples"] == 6 and d["num_landmarks"] == 2
    assert d["mre_mm"] == pytest.approx(mre(preds, gts, 0.1))
    assert d["sdr"] == {f"{r:g}": v for r, v in sdr(preds, gts, spacing_mm=0.1).items()}
    covs = covariances_from_raw(raws, "diag-only")
    ref = Covariance2x2(4.0, 1.0, 2.0)
    frobs = [covariance_agreement(Covariance2x2(*covs[s, 0]), ref).frobenius_rel for s in range(6)]
    assert d["covariance_agreement"][0]["frobenius_rel"] == pytest.approx(float(np.median(frobs)))
    emp = empirical_covariance(preds[:, 1] - anns[:, 1])
    assert d["displacement_analysis"][1]["empirical_covariance"] == pytest.approx([emp.sxx, emp.sxy, emp.syy])


def test_report_without_true_covariance_uses_empirical():
    report, _ = make_report(true=False)
    assert all(a["reference"] == "empirical" for a in report.covariance_agreement)
    jsonschema.validate(json.loads(report.to_json()), load_schema("eval_report.schema.json"))


def test_report_single_sample_and_empty():
    report, _ = make_report(m=1, true=False)
    assert report.median_frobenius_rel is None
    jsonschema.validate(json.loads(report.to_json()), load_schema("eval_report.schema.json"))
    with pytest.raises(ValueError):
        build_report(np.zeros((0, 2, 2)), np.zeros((0, 2, 3)), np.zeros((0, 2, 2)), np.zeros((0, 2, 2)), "diag-only")


def test_png_encoder_round_trip():
    img = np.linspace(0, 1, 12).reshape(3, 4)
    data = _png_bytes(img)
    assert data[:8] == b"\x89PNG\r\n\x1a\n"
    idat_len = int.from_bytes(data[33:37], "big")
    raw = zlib.decompress(data[41:41 + idat_len])
    rows = np.frombuffer(raw, dtype=np.uint8).reshape(3, 5)
    assert np.all(rows[:, 0] == 0)
    np.testing.assert_array_equal(rows[:, 1:], np.rint(img * 255))


def test_overlay_ellipses_match_ellipse_parameters():
    gt = np.array([[10.0, 12.0], [20.0, 22.0]])
    pred = gt + 0.5
    covs = np.array([[4.0, 1.0, 2.0], [1.0, 0.0, 9.0]])
    svg = overlay_svg(np.zeros((32, 32)), gt, pred, covs, true_covs=covs, k=2.0)
    root = ET.fromstring(svg)
    ns = "{http://www.w3.org/2000/svg}"
    predicted = [e for e in root.iter(f"{ns}ellipse") if e.get("class") == "predicted"]
    assert len(predicted) == 2 and len(list(root.iter(f"{ns}ellipse"))) == 4
    for el, c, p in zip(predicted, covs, pred):
        e = ellipse_from_covariance(Covariance2x2(*c), p, 2.0)
        assert float(el.get("rx")) == pytest.approx(e.semi_major, abs=1e-4)
        assert float(el.get("ry")) == pytest.approx(e.semi_minor, abs=1e-4)
        assert float(el.get("cx")) == pytest.approx(p[0], abs=1e-4)
        assert f"rotate({math.degrees(e.angle):.4f}" in el.get("transform")
