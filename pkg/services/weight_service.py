import logging
import math
from typing import List, Tuple, Union

import numpy as np
import torch

from models.exceptions import PreconditionError, ShapeError
from models.schemas import InfoConfig, PatchWeightGrid, PerceptualFeatures, WeightSet
from services.backbone_service import VGGBackbone
from utils.filters import laplacian_of_gaussian

logger = logging.getLogger(__name__)

ImageLike = Union[np.ndarray, torch.Tensor]


def _as_maps(fmap: ImageLike) -> torch.Tensor:
    """Coerce a 2-D map or a C x H x W stack to float64 C x H x W"""
    t = torch.as_tensor(fmap).detach().to(torch.float64)
    if t.dim() == 2:
        t = t.unsqueeze(0)
    if t.dim() != 3:
        raise ShapeError(f"Expected a 2-D map or a C x H x W stack, got shape {tuple(t.shape)}")
    return t


def channel_entropy(maps: torch.Tensor, bins: int = 256) -> torch.Tensor:
    """
    Shannon entropy (bits) of each channel's min-max normalised histogram

    Args:
        maps: C x H x W
        bins: histogram bins over each channel's own [min, max]

    Returns:
        C entropies; constant channels score 0
    """
    flat = maps.reshape(maps.shape[0], -1).to(torch.float64)
    if flat.shape[1] == 0:
        raise PreconditionError("Cannot take the entropy of an empty map")
    lo = flat.min(dim=1, keepdim=True).values
    hi = flat.max(dim=1, keepdim=True).values
    span = hi - lo
    constant = (span <= 0).squeeze(1)
    norm = (flat - lo) / torch.where(span > 0, span, torch.ones_like(span))
    idx = torch.clamp((norm * bins).floor().long(), 0, bins - 1)
    counts = torch.zeros(flat.shape[0], bins, dtype=torch.float64).scatter_add_(1, idx, torch.ones_like(flat))
    p = counts / flat.shape[1]
    entropy = -(torch.where(p > 0, p * torch.log2(p), torch.zeros_like(p))).sum(dim=1)
    return torch.where(constant, torch.zeros_like(entropy), entropy)


def channel_log_energy(maps: torch.Tensor, size: int = 7, sigma: float = 1.0, padding: str = "replicate") -> torch.Tensor:
    """Per-channel mean of the squared LoG response (C x H x W -> C)"""
    if maps.shape[-1] < size or maps.shape[-2] < size:
        raise PreconditionError(f"Map {tuple(maps.shape[-2:])} is smaller than the {size} x {size} LoG support")
    response = laplacian_of_gaussian(maps.unsqueeze(0).to(torch.float64), size, sigma, padding)[0]
    return response.pow(2).flatten(1).mean(dim=1)


def feature_entropy(fmap: ImageLike, bins: int = 256) -> float:
    maps = _as_maps(fmap)
    if maps.numel() == 0:
        raise PreconditionError("Cannot take the entropy of an empty map")
    if not torch.isfinite(maps).all():
        raise PreconditionError("Feature map holds non-finite values")
    return float(channel_entropy(maps, bins)[0])


def log_gradient_energy(fmap: ImageLike, size: int = 7, sigma: float = 1.0, padding: str = "replicate") -> float:
    """Squared L2 norm of the LoG-filtered map divided by its pixel count"""
    return float(channel_log_energy(_as_maps(fmap), size, sigma, padding)[0])


def intensity_statistic(feats: PerceptualFeatures, cfg: InfoConfig) -> float:
    """Stage average of the channel average of entropy + delta * std"""
    per_stage = []
    for stage in feats.stages:
        maps = stage.detach().to(torch.float64)
        std = maps.flatten(1).std(dim=1, correction=0)
        per_stage.append((channel_entropy(maps, cfg.entropy_bins) + cfg.delta * std).mean())
    return float(torch.stack(per_stage).mean())


def gradient_statistic(feats: PerceptualFeatures, cfg: InfoConfig) -> float:
    """Stage average of the channel average of LoG gradient energy"""
    per_stage = [
        channel_log_energy(stage.detach(), cfg.log_size, cfg.log_sigma).mean()
        for stage in feats.stages
    ]
    return float(torch.stack(per_stage).mean())


def tempered_softmax(a: float, b: float, c: float) -> Tuple[float, float]:
    """Two-way softmax of (a / c, b / c), stabilised by max subtraction"""
    if c <= 0:
        raise PreconditionError(f"Temperature must be positive, got {c}")
    m = max(a, b) / c
    ea = math.exp(a / c - m)
    eb = math.exp(b / c - m)
    total = ea + eb
    return ea / total, eb / total


def _check_pair(ir: ImageLike, vis_y: ImageLike) -> Tuple[torch.Tensor, torch.Tensor]:
    ir_t = torch.as_tensor(ir).detach().to(torch.float64).squeeze()
    vis_t = torch.as_tensor(vis_y).detach().to(torch.float64).squeeze()
    if ir_t.dim() != 2 or ir_t.shape != vis_t.shape:
        raise ShapeError(f"ir {tuple(ir_t.shape)} and vis_y {tuple(vis_t.shape)} must be equal-shape 2-D images")
    return ir_t, vis_t


def image_weights(ir: ImageLike, vis_y: ImageLike, backbone: VGGBackbone, cfg: InfoConfig) -> WeightSet:
    """Image-level intensity and gradient weights from shallow VGG-16 features"""
    ir_t, vis_t = _check_pair(ir, vis_y)
    feats_ir = backbone.perceptual_features(ir_t, "ir", cfg.depth)
    feats_vis = backbone.perceptual_features(vis_t, "vis", cfg.depth)
    int_ir, int_vis = tempered_softmax(intensity_statistic(feats_ir, cfg), intensity_statistic(feats_vis, cfg), cfg.c_int)
    grad_ir, grad_vis = tempered_softmax(gradient_statistic(feats_ir, cfg), gradient_statistic(feats_vis, cfg), cfg.c_grad)
    return WeightSet(int_ir=int_ir, int_vis=int_vis, grad_ir=grad_ir, grad_vis=grad_vis)


def _windows(img: torch.Tensor, window: int, stride: int) -> torch.Tensor:
    """Row-major K x window x window stack of full windows"""
    tiles = img.unfold(0, window, stride).unfold(1, window, stride)
    return tiles.reshape(-1, window, window)


def patch_weights(ir: ImageLike, vis_y: ImageLike, cfg: InfoConfig) -> PatchWeightGrid:
    """
    Window-level weights from raw pixels

    Each window scores (mean + delta * std) / c_int for intensity and its
    LoG energy / c_grad for gradients; the two modalities then go through
    the two-way softmax per window.
    """
    ir_t, vis_t = _check_pair(ir, vis_y)
    height, width = ir_t.shape
    if height < cfg.window or width < cfg.window:
        raise PreconditionError(f"Image {height} x {width} is smaller than the {cfg.window} px window")

    rows, cols, origins = PatchWeightGrid.tile_origins(height, width, cfg.window, cfg.stride)
    stats = []
    for img in (ir_t, vis_t):
        tiles = _windows(img, cfg.window, cfg.stride)
        flat = tiles.flatten(1)
        intensity = flat.mean(dim=1) + cfg.delta * flat.std(dim=1, correction=0)
        gradient = channel_log_energy(tiles, cfg.log_size, cfg.log_sigma)
        stats.append((intensity.tolist(), gradient.tolist()))

    (int_ir, grad_ir), (int_vis, grad_vis) = stats
    cells = []
    for k in range(len(origins)):
        wi = tempered_softmax(int_ir[k], int_vis[k], cfg.c_int)
        wg = tempered_softmax(grad_ir[k], grad_vis[k], cfg.c_grad)
        cells.append(WeightSet(int_ir=wi[0], int_vis=wi[1], grad_ir=wg[0], grad_vis=wg[1]))
    return PatchWeightGrid(window=cfg.window, stride=cfg.stride, rows=rows, cols=cols, origins=origins, cells=cells)


class WeightService:
    """Per-batch weight generation used by training and the weights dump"""

    def __init__(
        self,
        backbone: VGGBackbone,
        cfg: InfoConfig,
        fixed_image_weights: bool = False,
        fixed_patch_weights: bool = False,
    ):
        if backbone.depth < cfg.depth:
            raise PreconditionError(f"Backbone has {backbone.depth} stages, weights need {cfg.depth}")
        self.backbone = backbone
        self.cfg = cfg
        self.fixed_image_weights = fixed_image_weights
        self.fixed_patch_weights = fixed_patch_weights

    def image_weights(self, ir: ImageLike, vis_y: ImageLike) -> WeightSet:
        if self.fixed_image_weights:
            return WeightSet.uniform()
        return image_weights(ir, vis_y, self.backbone, self.cfg)

    def patch_weights(self, ir: ImageLike, vis_y: ImageLike) -> PatchWeightGrid:
        if self.fixed_patch_weights:
            height, width = _check_pair(ir, vis_y)[0].shape
            return PatchWeightGrid.uniform(height, width, self.cfg.window, self.cfg.stride)
        return patch_weights(ir, vis_y, self.cfg)

    def batch(self, ir: torch.Tensor, vis_y: torch.Tensor) -> Tuple[List[WeightSet], List[PatchWeightGrid]]:
        """Weights per image of an N x 1 x H x W batch, computed without gradient flow"""
        weights, grids = [], []
        with torch.no_grad():
            for ir_img, vis_img in zip(ir.detach(), vis_y.detach()):
                weights.append(self.image_weights(ir_img[0], vis_img[0]))
                grids.append(self.patch_weights(ir_img[0], vis_img[0]))
        return weights, grids

    def stage_count(self) -> int:
        return self.cfg.depth
