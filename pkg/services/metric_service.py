import json
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from prettytable import PrettyTable
from scipy.ndimage import correlate
from tqdm import tqdm

from config.settings import settings
from models.exceptions import EmptyManifestError, MissingFusedImageError, PreconditionError, ShapeError
from models.schemas import DatasetManifest, ImagePair, MetricsReport, ReportMetadata
from services.dataset_service import load_pair
from utils.color import rgb_to_ycbcr
from utils.image_io import read_image

logger = logging.getLogger(__name__)

# Published TNO means of the full-scale model; comparison only, never a gate
REFERENCE_TNO = {"en": 7.129, "vif": 0.861, "scd": 1.858, "qabf": 0.356}

DISPLAY_NAMES = {
    "en": "EN", "vif": "VIF", "scd": "SCD", "mse": "MSE",
    "ag": "AG", "cc": "CC", "qabf": "Q^AB/F", "sd": "SD",
}

# Petrovic-Xydeas sigmoid constants (gamma, kappa, sigma)
QABF_STRENGTH = (0.9994, -15.0, 0.5)
QABF_ORIENTATION = (0.9879, -22.0, 0.8)

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T

VIF_NOISE_VAR = 0.005 * 255.0 * 255.0
VIF_SCALES = 4
EPS = 1e-10


def quantize(img: np.ndarray) -> np.ndarray:
    """[0, 1] image -> 8-bit grid values 0..255 as float64"""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeError(f"Metrics take single-channel H x W images, got shape {img.shape}")
    return np.round(np.clip(img, 0.0, 1.0) * 255.0)


def _same_shape(*images: np.ndarray) -> None:
    for img in images[1:]:
        if img.shape != images[0].shape:
            raise ShapeError(f"Shape mismatch: {images[0].shape} vs {img.shape}")


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation; zero variance on either side yields 0"""
    da = a - a.mean()
    db = b - b.mean()
    denom = np.sqrt((da * da).sum() * (db * db).sum())
    if denom == 0:
        return 0.0
    return float((da * db).sum() / denom)


def en(img: np.ndarray) -> float:
    q = quantize(img).astype(np.int64)
    p = np.bincount(q.ravel(), minlength=256) / q.size
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum()) + 0.0


def sd(img: np.ndarray) -> float:
    return float(quantize(img).std())


def mse(fused: np.ndarray, ir: np.ndarray, vis: np.ndarray) -> float:
    """Mean of the two source MSEs on the [0, 1] scale"""
    _same_shape(fused, ir, vis)
    f, a, b = (quantize(x) / 255.0 for x in (fused, ir, vis))
    return float(0.5 * (((f - a) ** 2).mean() + ((f - b) ** 2).mean()))


def ag(img: np.ndarray) -> float:
    """Average gradient with forward differences"""
    q = quantize(img)
    if min(q.shape) < 2:
        raise PreconditionError("AG needs at least a 2 x 2 image")
    gx = q[:-1, 1:] - q[:-1, :-1]
    gy = q[1:, :-1] - q[:-1, :-1]
    return float(np.sqrt((gx ** 2 + gy ** 2) / 2.0).mean())


def cc(fused: np.ndarray, ir: np.ndarray, vis: np.ndarray) -> float:
    _same_shape(fused, ir, vis)
    f, a, b = quantize(fused), quantize(ir), quantize(vis)
    return 0.5 * (_pearson(f, a) + _pearson(f, b))


def scd(fused: np.ndarray, ir: np.ndarray, vis: np.ndarray) -> float:
    """Sum of the correlations of differences"""
    _same_shape(fused, ir, vis)
    f, a, b = quantize(fused), quantize(ir), quantize(vis)
    return _pearson(f - b, a) + _pearson(f - a, b)


def sobel_edges(q: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Edge strength and orientation atan(gy / gx), pi / 2 where gx == 0"""
    gx = correlate(q, SOBEL_X, mode="nearest")
    gy = correlate(q, SOBEL_Y, mode="nearest")
    strength = np.sqrt(gx ** 2 + gy ** 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        orientation = np.where(gx == 0, np.pi / 2.0, np.arctan(gy / np.where(gx == 0, 1.0, gx)))
    return strength, orientation


def _edge_preservation(g_s, a_s, g_f, a_f) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        rel_strength = np.where(g_s > g_f, g_f / g_s, np.where(g_f > 0, g_s / g_f, 0.0))
    rel_strength = np.nan_to_num(rel_strength)
    rel_orientation = 1.0 - np.abs(a_s - a_f) / (np.pi / 2.0)
    gg, kg, sg = QABF_STRENGTH
    ga, ka, sa = QABF_ORIENTATION
    q_g = gg / (1.0 + np.exp(kg * (rel_strength - sg)))
    q_a = ga / (1.0 + np.exp(ka * (rel_orientation - sa)))
    # nothing is transferred where the fused image has no edge
    return np.where(g_f > 0, q_g * q_a, 0.0)


def qabf(fused: np.ndarray, ir: np.ndarray, vis: np.ndarray) -> float:
    """Edge-transfer score weighted by source edge strength (L = 1)"""
    _same_shape(fused, ir, vis)
    g_f, a_f = sobel_edges(quantize(fused))
    g_a, a_a = sobel_edges(quantize(ir))
    g_b, a_b = sobel_edges(quantize(vis))
    q_af = _edge_preservation(g_a, a_a, g_f, a_f)
    q_bf = _edge_preservation(g_b, a_b, g_f, a_f)
    total = (g_a + g_b).sum()
    if total == 0:
        return 0.0
    return float((q_af * g_a + q_bf * g_b).sum() / total)


def _vif_window(size: int) -> np.ndarray:
    sigma = size / 5.0
    coords = np.arange(size) - size // 2
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def vif_single(ref: np.ndarray, dist: np.ndarray) -> float:
    """
    Pixel-domain multi-scale VIF of `dist` against the reference `ref`

    Both inputs are 0..255 arrays. Information is summed over four scales
    before taking the ratio.
    """
    ref = ref.astype(np.float64)
    dist = dist.astype(np.float64)
    num, den = 0.0, 0.0
    for scale in range(1, VIF_SCALES + 1):
        window = _vif_window(2 ** (VIF_SCALES - scale + 1) + 1)
        if scale > 1:
            ref = correlate(ref, window, mode="reflect")[::2, ::2]
            dist = correlate(dist, window, mode="reflect")[::2, ::2]

        mu1 = correlate(ref, window, mode="reflect")
        mu2 = correlate(dist, window, mode="reflect")
        sigma1_sq = np.maximum(correlate(ref * ref, window, mode="reflect") - mu1 * mu1, 0.0)
        sigma2_sq = np.maximum(correlate(dist * dist, window, mode="reflect") - mu2 * mu2, 0.0)
        sigma12 = correlate(ref * dist, window, mode="reflect") - mu1 * mu2

        g = sigma12 / (sigma1_sq + EPS)
        sv_sq = sigma2_sq - g * sigma12

        flat_ref = sigma1_sq < EPS
        g[flat_ref] = 0.0
        sv_sq[flat_ref] = sigma2_sq[flat_ref]
        sigma1_sq[flat_ref] = 0.0

        flat_dist = sigma2_sq < EPS
        g[flat_dist] = 0.0
        sv_sq[flat_dist] = 0.0

        negative = g < 0
        sv_sq[negative] = sigma2_sq[negative]
        g[negative] = 0.0
        sv_sq = np.maximum(sv_sq, EPS)

        num += np.log2(1.0 + g * g * sigma1_sq / (sv_sq + VIF_NOISE_VAR)).sum()
        den += np.log2(1.0 + sigma1_sq / VIF_NOISE_VAR).sum()
    if den == 0:
        return 0.0
    return float(num / den)


def vif(fused: np.ndarray, ir: np.ndarray, vis: np.ndarray) -> float:
    _same_shape(fused, ir, vis)
    f = quantize(fused)
    return 0.5 * (vif_single(quantize(ir), f) + vif_single(quantize(vis), f))


METRICS: Dict[str, Callable[..., float]] = {
    "en": lambda f, a, b: en(f),
    "vif": vif,
    "scd": scd,
    "mse": mse,
    "ag": lambda f, a, b: ag(f),
    "cc": cc,
    "qabf": qabf,
    "sd": lambda f, a, b: sd(f),
}


def parse_metrics(selection: Optional[str]) -> List[str]:
    """`en,vif,...` -> validated list in the order given; None selects all"""
    if not selection:
        return list(METRICS)
    names = [name.strip().lower() for name in selection.split(",") if name.strip()]
    unknown = [name for name in names if name not in METRICS]
    if unknown:
        raise PreconditionError(f"Unknown metrics: {', '.join(unknown)} (choose from {', '.join(METRICS)})")
    return names


def evaluate_images(fused: np.ndarray, ir: np.ndarray, vis_y: np.ndarray, metrics: Optional[Sequence[str]] = None) -> Dict[str, float]:
    return {name: METRICS[name](fused, ir, vis_y) for name in (metrics or list(METRICS))}


def find_fused(fused_dir: Path, identifier: str) -> Optional[Path]:
    """Prefer the fused Y file, fall back to the colour output"""
    for name in (f"{identifier}_y.png", f"{identifier}.png"):
        if (fused_dir / name).is_file():
            return fused_dir / name
    return None


def read_fused_y(path: Path) -> np.ndarray:
    img = read_image(path)
    return rgb_to_ycbcr(img)[0] if img.ndim == 3 else img


class MetricService:
    def __init__(self, metrics: Optional[Sequence[str]] = None, workers: Optional[int] = None):
        self.metrics = list(metrics) if metrics else list(METRICS)
        self.workers = workers if workers is not None else settings.NUM_WORKERS

    def score_pair(self, pair: ImagePair, fused_path: Path) -> Dict[str, float]:
        fused = read_fused_y(fused_path)
        if fused.shape != pair.ir.shape:
            raise ShapeError(f"Fused image for '{pair.identifier}' is {fused.shape}, sources are {pair.ir.shape}")
        return evaluate_images(fused, pair.ir, pair.vis_y, self.metrics)

    def evaluate_dataset(
        self,
        manifest: DatasetManifest,
        fused_dir: str,
        model_id: Optional[str] = None,
        config_hash: str = "",
    ) -> MetricsReport:
        """
        Score every manifest pair against its fused image

        Raises:
            EmptyManifestError: the manifest lists no pairs
            MissingFusedImageError: some identifiers have no fused file
        """
        if len(manifest) == 0:
            raise EmptyManifestError("Cannot evaluate an empty manifest")
        folder = Path(fused_dir)
        paths = {entry.id: find_fused(folder, entry.id) for entry in manifest.entries}
        missing = [identifier for identifier, path in paths.items() if path is None]
        if missing:
            raise MissingFusedImageError(missing)

        def _score(entry):
            return entry.id, self.score_pair(load_pair(entry), paths[entry.id])

        entries = manifest.entries
        if self.workers > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                results = list(tqdm(pool.map(_score, entries), total=len(entries), desc="Evaluating"))
        else:
            results = [_score(entry) for entry in tqdm(entries, desc="Evaluating")]

        per_image = dict(results)
        mean = {name: float(np.mean([scores[name] for scores in per_image.values()])) for name in self.metrics}
        metadata = ReportMetadata(
            dataset=manifest.root, model_id=model_id, config_hash=config_hash, metrics=self.metrics,
        )
        logger.info(f"Evaluated {len(per_image)} images on {len(self.metrics)} metrics")
        return MetricsReport(per_image=per_image, mean=mean, metadata=metadata)


def evaluate_dataset(
    manifest: DatasetManifest,
    fused_dir: str,
    metrics: Optional[Sequence[str]] = None,
    workers: Optional[int] = None,
    model_id: Optional[str] = None,
    config_hash: str = "",
) -> MetricsReport:
    return MetricService(metrics, workers).evaluate_dataset(manifest, fused_dir, model_id, config_hash)


def report_frame(report: MetricsReport) -> pd.DataFrame:
    """One row per image plus a trailing `mean` row, indexed by identifier"""
    frame = pd.DataFrame.from_dict(report.per_image, orient="index", columns=report.metadata.metrics)
    frame.loc["mean"] = [report.mean[name] for name in report.metadata.metrics]
    frame.index.name = "id"
    return frame


def write_report(report: MetricsReport, out_path: str) -> Tuple[Path, Path]:
    """Write `<out>.csv` and `<out>.json`; returns both paths"""
    csv_path = Path(out_path)
    if csv_path.suffix.lower() != ".csv":
        csv_path = csv_path.with_suffix(".csv")
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    report_frame(report).to_csv(csv_path)
    json_path = csv_path.with_suffix(".json")
    json_path.write_text(json.dumps(report.model_dump(mode="json"), indent=2), encoding="utf-8")
    return csv_path, json_path


def summary_table(report: MetricsReport) -> PrettyTable:
    table = PrettyTable(["Metric", "Mean", "Reference (TNO)"])
    for name in report.metadata.metrics:
        reference = REFERENCE_TNO.get(name)
        table.add_row([
            DISPLAY_NAMES[name],
            f"{report.mean[name]:.4f}",
            f"{reference:.3f}" if reference is not None else "-",
        ])
    return table


def compare_reference(report: MetricsReport) -> Dict[str, float]:
    """Mean minus the published TNO value, for the metrics both share"""
    return {name: report.mean[name] - value for name, value in REFERENCE_TNO.items() if name in report.mean}
