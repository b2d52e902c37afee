import json
import logging
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional

import numpy as np
import pandas as pd
import torch
from torchvision.utils import make_grid, save_image as save_tensor_image
from tqdm import tqdm

from config.settings import settings
from models.exceptions import PreconditionError
from models.network import AttentionPair, MDANet, build_model
from models.schemas import DatasetManifest, FusionMode, ImagePair, InfoConfig, ModelParams, PatchWeightGrid, WeightSet
from services.backbone_service import VGGBackbone
from services.dataset_service import load_pairs
from services.weight_service import image_weights, patch_weights
from storage.param_store import load_params
from utils.color import ycbcr_to_rgb
from utils.image_io import save_image

logger = logging.getLogger(__name__)


class FusionResult(NamedTuple):
    identifier: str
    fused_y: np.ndarray      # H x W in [0, 1]
    fused_rgb: np.ndarray    # H x W x 3 in [0, 1]
    attention: List[Optional[AttentionPair]]


def _to_tensor(img: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(img)).float()[None, None]


def normalize_channels(maps: torch.Tensor) -> torch.Tensor:
    """Min-max stretch each channel of C x H x W; constant channels keep their value"""
    flat = maps.flatten(1)
    lo = flat.min(dim=1).values[:, None, None]
    hi = flat.max(dim=1).values[:, None, None]
    span = hi - lo
    return torch.where(span > 0, (maps - lo) / torch.where(span > 0, span, torch.ones_like(span)), maps)


class FusionService:
    """Runs a trained network on full-size pairs and writes fused images"""

    def __init__(self, model: MDANet):
        self.model = model.eval()

    @classmethod
    def from_params(cls, params: ModelParams) -> "FusionService":
        return cls(build_model(params.manifest.net_config, params.tensors, seed=None))

    @classmethod
    def from_checkpoint(cls, path: str) -> "FusionService":
        return cls.from_params(load_params(path))

    def fuse_pair(self, pair: ImagePair) -> FusionResult:
        """Fuse Y, then restack it with the visible chroma"""
        out = self.model.fuse(_to_tensor(pair.ir), _to_tensor(pair.vis_y))
        fused_y = out.fused[0, 0].double().numpy()
        fused_rgb = ycbcr_to_rgb(fused_y, pair.vis_cb, pair.vis_cr)
        return FusionResult(pair.identifier, fused_y, fused_rgb, out.attention)

    def write_result(self, result: FusionResult, out_dir: str, gray: bool = False) -> List[Path]:
        folder = Path(out_dir)
        written = [save_image(folder / f"{result.identifier}.png", result.fused_rgb)]
        if gray:
            written.append(save_image(folder / f"{result.identifier}_y.png", result.fused_y))
        return written

    def fuse_manifest(self, manifest: DatasetManifest, out_dir: str, gray: bool = False, workers: Optional[int] = None) -> List[Path]:
        """Decode with a bounded pool, fuse serially on this instance, one file set per identifier"""
        pairs = load_pairs(manifest, workers if workers is not None else settings.NUM_WORKERS)
        written = []
        for pair in tqdm(pairs, desc="Fusing"):
            written.extend(self.write_result(self.fuse_pair(pair), out_dir, gray))
        logger.info(f"✓ Fused {len(pairs)} pairs into {out_dir}")
        return written

    def dump_attention(self, pair: ImagePair, out_dir: str) -> List[Path]:
        """
        Spatial attention grids per fusion block (block{k}_sm_ir.png /
        block{k}_sm_vis.png), channels normalised for display, plus the raw
        recorded maps in attention_maps.pt
        """
        if self.model.cfg.fusion_mode != FusionMode.attention:
            raise PreconditionError(f"Model fuses by '{self.model.cfg.fusion_mode.value}', it has no attention maps")
        result = self.fuse_pair(pair)
        folder = Path(out_dir)
        folder.mkdir(parents=True, exist_ok=True)

        written, raw = [], {}
        for k, att in enumerate(result.attention, start=1):
            for name in ("sm_ir", "sm_vis"):
                maps = getattr(att, name)[0]
                grid = make_grid(normalize_channels(maps)[:, None], nrow=settings.ATTN_GRID_COLUMNS, padding=2)
                path = folder / f"block{k}_{name}.png"
                save_tensor_image(grid, path)
                written.append(path)
            raw[f"block{k}"] = {name: getattr(att, name)[0].clone() for name in AttentionPair._fields}
        raw_path = folder / "attention_maps.pt"
        torch.save(raw, raw_path)
        written.append(raw_path)
        return written


def dump_weights(pair: ImagePair, backbone: VGGBackbone, cfg: InfoConfig, out_dir: str) -> Dict[str, Path]:
    """Image-level WeightSet as JSON and the patch grid as CSV"""
    folder = Path(out_dir)
    folder.mkdir(parents=True, exist_ok=True)
    weights: WeightSet = image_weights(pair.ir, pair.vis_y, backbone, cfg)
    grid: PatchWeightGrid = patch_weights(pair.ir, pair.vis_y, cfg)

    json_path = folder / f"{pair.identifier}_weights.json"
    json_path.write_text(json.dumps({
        "id": pair.identifier,
        "backbone": backbone.provenance,
        "depth": cfg.depth,
        "weights": weights.model_dump(),
        "patch_grid": {"window": grid.window, "stride": grid.stride, "rows": grid.rows, "cols": grid.cols},
    }, indent=2), encoding="utf-8")

    csv_path = folder / f"{pair.identifier}_patch_weights.csv"
    pd.DataFrame.from_records(grid.to_records()).to_csv(csv_path, index=False)
    return {"json": json_path, "csv": csv_path}
