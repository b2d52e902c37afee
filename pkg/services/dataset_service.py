import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Literal, NamedTuple, Optional, Tuple

import numpy as np
import torch
from PIL import Image
from scipy.ndimage import gaussian_filter

from config.settings import settings
from models.exceptions import DatasetError, EmptyManifestError, PreconditionError, ShapeError
from models.schemas import DatasetManifest, ImagePair, ManifestEntry
from utils.color import rgb_to_ycbcr
from utils.image_io import IMAGE_SUFFIXES, read_image

logger = logging.getLogger(__name__)

Layout = Literal["paired_dirs", "suffix_pairs"]


def make_pair(ir: np.ndarray, vis: np.ndarray, identifier: str) -> ImagePair:
    """
    Build a registered ImagePair from decoded arrays

    A 3-channel infrared file is reduced to its luma. A grayscale visible
    image is used as Y directly with neutral chroma (Cb = Cr = 0.5).
    """
    if ir.ndim == 3:
        ir = rgb_to_ycbcr(ir)[0]
    if vis.ndim == 2:
        vis_y = vis.astype(np.float64)
        vis_cb = np.full_like(vis_y, 0.5)
        vis_cr = np.full_like(vis_y, 0.5)
        vis = np.repeat(vis_y[..., None], 3, axis=2)
    else:
        vis_y, vis_cb, vis_cr = rgb_to_ycbcr(vis)
    if ir.shape != vis_y.shape:
        raise ShapeError(f"Pair '{identifier}' is not registered: ir {ir.shape} vs vis {vis_y.shape}")
    return ImagePair(
        ir=ir.astype(np.float64), vis=vis.astype(np.float64),
        vis_y=vis_y, vis_cb=vis_cb, vis_cr=vis_cr, identifier=identifier,
    )


def load_pair(entry: ManifestEntry) -> ImagePair:
    return make_pair(read_image(entry.ir), read_image(entry.vis), entry.id)


def load_pairs(manifest: DatasetManifest, workers: Optional[int] = None) -> List[ImagePair]:
    """Decode every manifest pair with a bounded thread pool, keeping manifest order"""
    workers = workers if workers is not None else settings.NUM_WORKERS
    if workers <= 1:
        return [load_pair(entry) for entry in manifest.entries]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(load_pair, manifest.entries))


def crop_origin(height: int, width: int, size: int, rng_seed: int) -> Tuple[int, int]:
    if size > min(height, width) or size < 1:
        raise PreconditionError(f"Crop size {size} does not fit a {height} x {width} image")
    rng = np.random.default_rng(rng_seed)
    y = int(rng.integers(0, height - size + 1))
    x = int(rng.integers(0, width - size + 1))
    return y, x


def crop_patch(pair: ImagePair, size: int, rng_seed: int) -> ImagePair:
    """Cut the same random size x size window out of both modalities"""
    y, x = crop_origin(pair.height, pair.width, size, rng_seed)
    window = (slice(y, y + size), slice(x, x + size))
    return ImagePair(
        ir=pair.ir[window].copy(),
        vis=pair.vis[window].copy(),
        vis_y=pair.vis_y[window].copy(),
        vis_cb=pair.vis_cb[window].copy(),
        vis_cr=pair.vis_cr[window].copy(),
        identifier=pair.identifier,
        target_mask=None if pair.target_mask is None else pair.target_mask[window].copy(),
    )


def _image_files(folder: Path) -> Dict[str, Path]:
    return {p.stem: p for p in sorted(folder.iterdir()) if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES}


def _suffix_files(root: Path, suffix: str) -> Dict[str, Path]:
    files = {}
    for p in sorted(root.iterdir()):
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES and p.stem.endswith(suffix):
            files[p.stem[: -len(suffix)]] = p
    return files


def _check_sizes(identifier: str, ir_path: Path, vis_path: Path) -> None:
    try:
        with Image.open(ir_path) as ir, Image.open(vis_path) as vis:
            ir_size, vis_size = ir.size, vis.size
    except OSError as e:
        raise DatasetError(f"Pair '{identifier}' does not decode: {e}") from e
    if ir_size != vis_size:
        raise ShapeError(f"Pair '{identifier}' is not registered: ir {ir_size} vs vis {vis_size}")


def scan_dataset(root: str, layout: Layout = "paired_dirs", split: str = "train") -> DatasetManifest:
    """
    Pair infrared and visible files under a dataset root by filename stem

    Args:
        root: dataset directory
        layout: `paired_dirs` (root/ir/*, root/vis/*) or `suffix_pairs`
            (root/*_ir.*, root/*_vis.*)
        split: manifest split tag

    Returns:
        DatasetManifest sorted by identifier
    """
    root_path = Path(root)
    if not root_path.is_dir():
        raise DatasetError(f"Dataset root does not exist: {root}")

    if layout == "paired_dirs":
        ir_dir, vis_dir = root_path / "ir", root_path / "vis"
        ir_files = _image_files(ir_dir) if ir_dir.is_dir() else {}
        vis_files = _image_files(vis_dir) if vis_dir.is_dir() else {}
    elif layout == "suffix_pairs":
        ir_files = _suffix_files(root_path, "_ir")
        vis_files = _suffix_files(root_path, "_vis")
    else:
        raise PreconditionError(f"Unknown dataset layout: {layout}")

    for orphan in sorted(set(ir_files) ^ set(vis_files)):
        side = "infrared" if orphan in ir_files else "visible"
        logger.warning(f"⚠ Excluding '{orphan}': only a {side} image was found")

    entries = []
    for identifier in sorted(set(ir_files) & set(vis_files)):
        _check_sizes(identifier, ir_files[identifier], vis_files[identifier])
        entries.append(ManifestEntry(id=identifier, ir=str(ir_files[identifier]), vis=str(vis_files[identifier])))

    if not entries:
        raise EmptyManifestError(f"No infrared/visible pairs found under {root} ({layout})")

    logger.info(f"Found {len(entries)} pairs under {root}")
    return DatasetManifest(root=str(root_path), layout=layout, split=split, entries=entries)


def export_manifest(manifest: DatasetManifest, path: str) -> Path:
    """Write the manifest as JSON lines: {"id": ..., "ir": ..., "vis": ...}"""
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as f:
        for entry in manifest.entries:
            f.write(json.dumps(entry.model_dump()) + "\n")
    return out


def read_manifest(path: str, split: str = "eval") -> DatasetManifest:
    """Read a JSON-lines manifest; relative paths resolve against its folder"""
    manifest_path = Path(path)
    if not manifest_path.is_file():
        raise DatasetError(f"Manifest not found: {path}")
    base = manifest_path.parent
    entries = []
    with open(manifest_path, "r", encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            record = json.loads(line)
            entries.append(ManifestEntry(
                id=record["id"],
                ir=str(base / record["ir"]) if not Path(record["ir"]).is_absolute() else record["ir"],
                vis=str(base / record["vis"]) if not Path(record["vis"]).is_absolute() else record["vis"],
            ))
    if not entries:
        raise EmptyManifestError(f"Manifest {path} lists no pairs")
    return DatasetManifest(root=str(base), layout="jsonl", split=split, entries=entries)


def make_synthetic_pair(height: int = 128, width: int = 128, seed: int = 0, identifier: Optional[str] = None) -> ImagePair:
    """
    Deterministic desk-scale stand-in for a registered infrared/visible pair

    The visible image carries bandlimited noise, rectangles and stripes; the
    infrared image is a smooth blob field with one bright elliptical thermal
    target, recorded in `target_mask`.
    """
    if height < 32 or width < 32:
        raise PreconditionError(f"Synthetic pairs need H, W >= 32, got {height} x {width}")

    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width]

    texture = gaussian_filter(rng.standard_normal((height, width)), sigma=1.2)
    texture = 0.25 * texture / (np.abs(texture).max() + 1e-12)
    luminance = 0.45 + texture
    for _ in range(4):
        h = int(rng.integers(height // 8, height // 2))
        w = int(rng.integers(width // 8, width // 2))
        y0 = int(rng.integers(0, height - h))
        x0 = int(rng.integers(0, width - w))
        luminance[y0:y0 + h, x0:x0 + w] += rng.uniform(-0.25, 0.25)
    period = rng.uniform(6.0, 12.0)
    luminance += 0.08 * np.sign(np.sin(2.0 * np.pi * xx / period))
    tint = rng.uniform(0.85, 1.15, size=3)
    vis = np.clip(np.clip(luminance, 0.0, 1.0)[..., None] * tint, 0.0, 1.0)

    blobs = gaussian_filter(rng.standard_normal((height, width)), sigma=max(height, width) / 8.0)
    blobs = 0.1 + 0.3 * (blobs - blobs.min()) / (np.ptp(blobs) + 1e-12)
    cy = rng.uniform(0.3, 0.7) * height
    cx = rng.uniform(0.3, 0.7) * width
    ry = rng.uniform(height / 8.0, height / 5.0)
    rx = rng.uniform(width / 8.0, width / 5.0)
    mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    ir = blobs.copy()
    ir[mask] = 0.85
    ir = np.clip(gaussian_filter(ir, sigma=1.0), 0.0, 1.0)

    pair = make_pair(ir, vis, identifier or f"synthetic_{seed:04d}")
    pair.target_mask = mask
    return pair


class PatchBatch(NamedTuple):
    ir: torch.Tensor      # N x 1 x crop x crop
    vis_y: torch.Tensor   # N x 1 x crop x crop
    identifiers: List[str]


class PatchSampler:
    """
    Step-addressable batch source for training

    The batch for a given step depends only on (seed, step), so a resumed
    run sees exactly the batches an uninterrupted run would.
    """

    def __init__(self, pairs: List[ImagePair], crop: int, batch_size: int, seed: int):
        if not pairs:
            raise EmptyManifestError("Cannot sample patches from an empty pair list")
        for pair in pairs:
            if min(pair.height, pair.width) < crop:
                raise PreconditionError(f"Pair '{pair.identifier}' is smaller than the crop size {crop}")
        self.pairs = pairs
        self.crop = crop
        self.batch_size = batch_size
        self.seed = seed

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.pairs) / self.batch_size)

    def indices(self, step: int) -> np.ndarray:
        epoch, offset = divmod(step, self.steps_per_epoch)
        order = np.random.default_rng([self.seed, epoch]).permutation(len(self.pairs))
        order = np.resize(order, self.steps_per_epoch * self.batch_size)
        return order[offset * self.batch_size:(offset + 1) * self.batch_size]

    def batch(self, step: int, dtype: torch.dtype = torch.float32) -> PatchBatch:
        crop_seeds = np.random.default_rng([self.seed, step, 1]).integers(0, 2 ** 31 - 1, size=self.batch_size)
        crops = [crop_patch(self.pairs[i], self.crop, int(s)) for i, s in zip(self.indices(step), crop_seeds)]
        ir = torch.from_numpy(np.stack([c.ir for c in crops])[:, None]).to(dtype)
        vis_y = torch.from_numpy(np.stack([c.vis_y for c in crops])[:, None]).to(dtype)
        return PatchBatch(ir=ir, vis_y=vis_y, identifiers=[c.identifier for c in crops])
