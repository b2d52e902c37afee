import json

import numpy as np
import pandas as pd
import pytest
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import gaussian_filter

from models.exceptions import EmptyManifestError, MissingFusedImageError, PreconditionError, ShapeError
from models.schemas import DatasetManifest
from services.dataset_service import make_synthetic_pair, scan_dataset
from services.metric_service import (
    QABF_ORIENTATION, QABF_STRENGTH, REFERENCE_TNO, SOBEL_X, VIF_NOISE_VAR, _vif_window, ag, cc,
    compare_reference, en, evaluate_dataset, evaluate_images, mse, parse_metrics, qabf, quantize,
    scd, sd, summary_table, vif, vif_single, write_report,
)
from utils.image_io import read_image, save_image
from tests.conftest import grid_image


def test_entropy_anchors():
    assert en(np.full((16, 16), 0.5)) == 0.0
    half = np.zeros((16, 16))
    half[:, 8:] = 1.0
    assert en(half) == pytest.approx(1.0)
    ramp = (np.arange(256).reshape(16, 16)) / 255.0
    assert en(ramp) == pytest.approx(8.0)


def test_sd_and_mse_anchors():
    half = np.zeros((8, 8))
    half[:4] = 1.0
    assert sd(np.full((8, 8), 0.2)) == 0.0
    assert sd(half) == pytest.approx(127.5)

    ones, zeros = np.ones((8, 8)), np.zeros((8, 8))
    assert mse(ones, ones, ones) == 0.0
    assert mse(ones, zeros, ones) == pytest.approx(0.5)


def test_average_gradient_of_ramp():
    ramp = np.tile(np.arange(16) * 10.0 / 255.0, (16, 1))
    assert ag(np.full((8, 8), 0.3)) == 0.0
    assert ag(ramp) == pytest.approx(np.sqrt(50.0))


def test_average_gradient_matches_loop(rng):
    img = grid_image(rng, 12, 9)
    q = img * 255.0
    total = 0.0
    for i in range(11):
        for j in range(8):
            gx = q[i, j + 1] - q[i, j]
            gy = q[i + 1, j] - q[i, j]
            total += np.sqrt((gx * gx + gy * gy) / 2.0)
    assert ag(img) == pytest.approx(total / (11 * 8), rel=1e-12)


def test_correlation_coefficient(rng):
    a, b = grid_image(rng, 20, 20), grid_image(rng, 20, 20)
    assert cc(a, a, a) == pytest.approx(1.0)
    expected = 0.5 * (1.0 + np.corrcoef(a.ravel(), b.ravel())[0, 1])
    assert cc(a, a, b) == pytest.approx(expected, rel=1e-12)
    assert cc(np.full((20, 20), 0.5), a, b) == 0.0


def test_scd_of_constructed_sum(rng):
    a = rng.integers(0, 128, size=(24, 24)) / 255.0
    b = rng.integers(0, 128, size=(24, 24)) / 255.0
    assert scd(a + b, a, b) == pytest.approx(2.0, abs=1e-12)


def test_metrics_need_gray_inputs():
    with pytest.raises(ShapeError):
        quantize(np.zeros((4, 4, 3)))
    with pytest.raises(ShapeError):
        cc(np.zeros((4, 4)), np.zeros((4, 4)), np.zeros((4, 5)))


def _sobel_loop(q):
    padded = np.pad(q, 1, mode="edge")
    h, w = q.shape
    strength, orientation = np.zeros((h, w)), np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            patch = padded[i:i + 3, j:j + 3]
            gx = (patch * SOBEL_X).sum()
            gy = (patch * SOBEL_X.T).sum()
            strength[i, j] = np.sqrt(gx * gx + gy * gy)
            orientation[i, j] = np.pi / 2 if gx == 0 else np.arctan(gy / gx)
    return strength, orientation


def _preservation_loop(g_s, a_s, g_f, a_f):
    if g_f == 0:
        return 0.0
    g = g_f / g_s if g_s > g_f else g_s / g_f
    a = 1.0 - abs(a_s - a_f) / (np.pi / 2)
    gg, kg, sg = QABF_STRENGTH
    ga, ka, sa = QABF_ORIENTATION
    return gg / (1 + np.exp(kg * (g - sg))) * ga / (1 + np.exp(ka * (a - sa)))


def test_qabf_matches_loop(rng):
    f, a, b = (grid_image(rng, 10, 11) for _ in range(3))
    g_f, a_f = _sobel_loop(f * 255)
    g_a, a_a = _sobel_loop(a * 255)
    g_b, a_b = _sobel_loop(b * 255)
    num, den = 0.0, 0.0
    for i in range(10):
        for j in range(11):
            num += _preservation_loop(g_a[i, j], a_a[i, j], g_f[i, j], a_f[i, j]) * g_a[i, j]
            num += _preservation_loop(g_b[i, j], a_b[i, j], g_f[i, j], a_f[i, j]) * g_b[i, j]
            den += g_a[i, j] + g_b[i, j]
    assert qabf(f, a, b) == pytest.approx(num / den, rel=1e-10)


def test_qabf_self_transfer_and_flat_sources(rng):
    img = grid_image(rng, 16, 16)
    gg, kg, sg = QABF_STRENGTH
    ga, ka, sa = QABF_ORIENTATION
    ceiling = gg / (1 + np.exp(kg * (1 - sg))) * ga / (1 + np.exp(ka * (1 - sa)))
    assert qabf(img, img, img) == pytest.approx(ceiling, rel=1e-12)
    flat = np.full((16, 16), 0.4)
    assert qabf(img, flat, flat) == 0.0


def _correlate_reflect(img, window):
    r = window.shape[0] // 2
    views = sliding_window_view(np.pad(img, r, mode="symmetric"), window.shape)
    return np.einsum("ijkl,kl->ij", views, window)


def _vif_oracle(ref, dist):
    eps = 1e-10
    num = den = 0.0
    for scale in range(1, 5):
        window = _vif_window(2 ** (5 - scale) + 1)
        if scale > 1:
            ref = _correlate_reflect(ref, window)[::2, ::2]
            dist = _correlate_reflect(dist, window)[::2, ::2]
        mu1, mu2 = _correlate_reflect(ref, window), _correlate_reflect(dist, window)
        s1 = np.maximum(_correlate_reflect(ref * ref, window) - mu1 ** 2, 0)
        s2 = np.maximum(_correlate_reflect(dist * dist, window) - mu2 ** 2, 0)
        s12 = _correlate_reflect(ref * dist, window) - mu1 * mu2
        for v1, v2, c in zip(s1.ravel(), s2.ravel(), s12.ravel()):
            g = c / (v1 + eps)
            sv = v2 - g * c
            if v1 < eps:
                g, sv, v1 = 0.0, v2, 0.0
            if v2 < eps:
                g, sv = 0.0, 0.0
            if g < 0:
                sv, g = v2, 0.0
            sv = max(sv, eps)
            num += np.log2(1 + g * g * v1 / (sv + VIF_NOISE_VAR))
            den += np.log2(1 + v1 / VIF_NOISE_VAR)
    return num / den


def test_vif_matches_windowed_oracle(rng):
    ref = grid_image(rng, 40, 40) * 255
    dist = np.clip(ref + rng.normal(0, 20, size=ref.shape), 0, 255)
    assert vif_single(ref, dist) == pytest.approx(_vif_oracle(ref, dist), rel=1e-8)


def test_vif_of_reference_is_one(pair):
    q = quantize(pair.vis_y)
    assert vif_single(q, q) == pytest.approx(1.0, abs=1e-6)


def test_vif_drops_with_blur(pair):
    q = quantize(pair.vis_y)
    scores = [vif_single(q, gaussian_filter(q, sigma)) for sigma in (0.5, 1.5, 3.0)]
    assert 1.0 > scores[0] > scores[1] > scores[2]


def test_noise_lowers_vif_and_qabf():
    passed = 0
    for seed in range(20):
        sample = make_synthetic_pair(64, 64, seed=seed)
        clean = 0.5 * (sample.ir + sample.vis_y)
        noisy = np.clip(clean + np.random.default_rng(seed).normal(0, 0.1, clean.shape), 0, 1)
        better_vif = vif(clean, sample.ir, sample.vis_y) > vif(noisy, sample.ir, sample.vis_y)
        better_qabf = qabf(clean, sample.ir, sample.vis_y) > qabf(noisy, sample.ir, sample.vis_y)
        passed += better_vif and better_qabf
    assert passed >= 19


def test_parse_metrics():
    assert parse_metrics(None) == ["en", "vif", "scd", "mse", "ag", "cc", "qabf", "sd"]
    assert parse_metrics("EN, sd") == ["en", "sd"]
    with pytest.raises(PreconditionError):
        parse_metrics("en,psnr")


def test_evaluate_images_subset(rng):
    img = grid_image(rng, 16, 16)
    scores = evaluate_images(img, img, img, ["mse", "cc"])
    assert scores == {"mse": 0.0, "cc": pytest.approx(1.0)}


@pytest.fixture
def dataset(tmp_path, rng):
    for identifier in ("a", "b", "c"):
        save_image(tmp_path / "src" / "ir" / f"{identifier}.png", grid_image(rng, 24, 24))
        save_image(tmp_path / "src" / "vis" / f"{identifier}.png", grid_image(rng, 24, 24))
    return scan_dataset(str(tmp_path / "src"), split="eval")


def _write_fused(manifest, folder, skip=()):
    for entry in manifest.entries:
        if entry.id not in skip:
            save_image(folder / f"{entry.id}_y.png", read_image(entry.ir))


@pytest.mark.parametrize("workers", [1, 2])
def test_evaluate_dataset(tmp_path, dataset, workers):
    fused = tmp_path / "fused"
    _write_fused(dataset, fused)
    report = evaluate_dataset(dataset, str(fused), metrics=["en", "mse", "qabf"], workers=workers, model_id="m1")

    assert sorted(report.per_image) == ["a", "b", "c"]
    assert report.metadata.metrics == ["en", "mse", "qabf"]
    assert report.metadata.evaluated_on == "fused_y"
    assert report.mean["en"] == pytest.approx(np.mean([s["en"] for s in report.per_image.values()]))
    assert all(s["mse"] > 0 for s in report.per_image.values())


def test_evaluate_dataset_reports_missing_images(tmp_path, dataset):
    fused = tmp_path / "fused"
    _write_fused(dataset, fused, skip=("b",))
    with pytest.raises(MissingFusedImageError) as info:
        evaluate_dataset(dataset, str(fused))
    assert info.value.identifiers == ["b"]


def test_evaluate_empty_manifest(tmp_path):
    with pytest.raises(EmptyManifestError):
        evaluate_dataset(DatasetManifest(root=str(tmp_path)), str(tmp_path))


def test_write_report_and_summary(tmp_path, dataset):
    fused = tmp_path / "fused"
    _write_fused(dataset, fused)
    report = evaluate_dataset(dataset, str(fused), metrics=["en", "sd"], workers=1)
    csv_path, json_path = write_report(report, str(tmp_path / "out" / "metrics"))

    frame = pd.read_csv(csv_path, index_col="id")
    assert list(frame.columns) == ["en", "sd"]
    assert list(frame.index) == ["a", "b", "c", "mean"]
    assert frame.loc["mean", "sd"] == pytest.approx(report.mean["sd"])
    assert json.loads(json_path.read_text())["metadata"]["metrics"] == ["en", "sd"]

    table = summary_table(report).get_string()
    assert "EN" in table and f"{REFERENCE_TNO['en']:.3f}" in table
    assert set(compare_reference(report)) == {"en"}


def _loop_entropy(q):
    counts = {}
    for v in q.ravel():
        counts[v] = counts.get(v, 0) + 1
    return -sum(c / q.size * np.log2(c / q.size) for c in counts.values())


def _loop_pearson(a, b):
    ma, mb = a.mean(), b.mean()
    num = sum((x - ma) * (y - mb) for x, y in zip(a.ravel(), b.ravel()))
    den = np.sqrt(sum((x - ma) ** 2 for x in a.ravel()) * sum((y - mb) ** 2 for y in b.ravel()))
    return num / den


@pytest.mark.parametrize("seed", range(20))
def test_scalar_metrics_match_loops(seed):
    rng = np.random.default_rng(seed)
    f, a, b = (grid_image(rng, 32, 32) for _ in range(3))
    qf, qa, qb = f * 255, a * 255, b * 255

    assert en(f) == pytest.approx(_loop_entropy(np.round(qf)), abs=1e-6)
    assert sd(f) == pytest.approx(np.sqrt(sum((v - qf.mean()) ** 2 for v in qf.ravel()) / qf.size), abs=1e-6)
    assert mse(f, a, b) == pytest.approx(0.5 * (((f - a) ** 2).sum() + ((f - b) ** 2).sum()) / f.size, abs=1e-6)
    assert cc(f, a, b) == pytest.approx(0.5 * (_loop_pearson(qf, qa) + _loop_pearson(qf, qb)), abs=1e-6)
    assert scd(f, a, b) == pytest.approx(_loop_pearson(qf - qb, qa) + _loop_pearson(qf - qa, qb), abs=1e-6)


def test_qabf_of_constant_fused_is_zero(rng):
    a, b = grid_image(rng, 32, 32), grid_image(rng, 32, 32)
    assert qabf(np.full((32, 32), 0.5), a, b) == 0.0
