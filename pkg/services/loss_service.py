import logging
from typing import List, Sequence, Tuple, Union

import torch

from models.exceptions import PreconditionError, ShapeError
from models.network import FusedSet, NetOutput
from models.schemas import LossBreakdown, LossConfig, PatchWeightGrid, WeightSet
from services.backbone_service import VGGBackbone, extract_features
from utils.filters import filter2d, gaussian_window, laplacian_of_gaussian

logger = logging.getLogger(__name__)

STYLE_STAGES = 2
Weights = Union[WeightSet, Sequence[WeightSet]]
Grids = Union[PatchWeightGrid, Sequence[PatchWeightGrid]]


def _as_batch(x: torch.Tensor) -> torch.Tensor:
    while x.dim() < 4:
        x = x.unsqueeze(0)
    return x


def _check_same(*tensors: torch.Tensor) -> None:
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeError(f"Shape mismatch: {tuple(shape)} vs {tuple(t.shape)}")


def ssim(x: torch.Tensor, y: torch.Tensor, cfg: LossConfig = LossConfig()) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Gaussian-window SSIM for [0, 1] images

    Args:
        x, y: equal-shape H x W or N x 1 x H x W tensors
        cfg: window size, sigma and stabilising constants

    Returns:
        (MSSIM per image, shape N; local SSIM map over valid positions)
    """
    x, y = _as_batch(x), _as_batch(y)
    _check_same(x, y)
    if min(x.shape[-2:]) < cfg.ssim_window:
        raise PreconditionError(f"Images {tuple(x.shape[-2:])} are smaller than the {cfg.ssim_window} px SSIM window")

    window = gaussian_window(cfg.ssim_window, cfg.ssim_sigma, dtype=x.dtype)
    c1 = cfg.ssim_k1 ** 2
    c2 = cfg.ssim_k2 ** 2
    mu_x = filter2d(x, window, "valid")
    mu_y = filter2d(y, window, "valid")
    var_x = filter2d(x * x, window, "valid") - mu_x * mu_x
    var_y = filter2d(y * y, window, "valid") - mu_y * mu_y
    cov = filter2d(x * y, window, "valid") - mu_x * mu_y
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / ((mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2))
    return ssim_map.flatten(1).mean(dim=1), ssim_map


def _weight_tensor(weights: Weights, n: int, like: torch.Tensor) -> torch.Tensor:
    """N x 4 tensor (int_ir, int_vis, grad_ir, grad_vis)"""
    if isinstance(weights, WeightSet):
        weights = [weights] * n
    if len(weights) != n:
        raise ShapeError(f"Got {len(weights)} weight sets for a batch of {n}")
    return torch.tensor([w.as_tuple() for w in weights], dtype=like.dtype, device=like.device)


def _pixel_term(fused, ir, vis_y, w: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """Per-image grad-weighted (1 - SSIM) plus zeta times int-weighted MSE"""
    ssim_ir, _ = ssim(fused, ir, cfg)
    ssim_vis, _ = ssim(fused, vis_y, cfg)
    mse_ir = (fused - ir).pow(2).flatten(1).mean(dim=1)
    mse_vis = (fused - vis_y).pow(2).flatten(1).mean(dim=1)
    grad_term = w[:, 2] * (1.0 - ssim_ir) + w[:, 3] * (1.0 - ssim_vis)
    int_term = w[:, 0] * mse_ir + w[:, 1] * mse_vis
    return grad_term + cfg.zeta * int_term


def image_loss(fused: torch.Tensor, ir: torch.Tensor, vis_y: torch.Tensor, weights: Weights, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Whole-image pixel loss, averaged over the batch; one WeightSet per image"""
    fused, ir, vis_y = _as_batch(fused), _as_batch(ir), _as_batch(vis_y)
    _check_same(fused, ir, vis_y)
    w = _weight_tensor(weights, fused.shape[0], fused)
    return _pixel_term(fused, ir, vis_y, w, cfg).mean()


def _tiles(x: torch.Tensor, window: int, stride: int) -> torch.Tensor:
    """N x 1 x H x W -> (N*K) x 1 x window x window, row-major per image"""
    tiles = x.unfold(2, window, stride).unfold(3, window, stride)
    return tiles.reshape(-1, 1, window, window)


def patch_loss(fused: torch.Tensor, ir: torch.Tensor, vis_y: torch.Tensor, grids: Grids, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Mean over windows (and images) of the per-window pixel loss with that window's weights"""
    fused, ir, vis_y = _as_batch(fused), _as_batch(ir), _as_batch(vis_y)
    _check_same(fused, ir, vis_y)
    n = fused.shape[0]
    if isinstance(grids, PatchWeightGrid):
        grids = [grids] * n
    if len(grids) != n:
        raise ShapeError(f"Got {len(grids)} patch grids for a batch of {n}")

    grid = grids[0]
    if min(fused.shape[-2:]) < grid.window:
        raise PreconditionError(f"Images {tuple(fused.shape[-2:])} are smaller than the {grid.window} px patch window")
    rows, cols, _ = PatchWeightGrid.tile_origins(fused.shape[-2], fused.shape[-1], grid.window, grid.stride)
    for g in grids:
        if (g.rows, g.cols, g.window, g.stride) != (rows, cols, grid.window, grid.stride):
            raise ShapeError("Patch grids do not match the image geometry")

    w = torch.tensor(
        [cell.as_tuple() for g in grids for cell in g.cells],
        dtype=fused.dtype, device=fused.device,
    )
    per_window = _pixel_term(
        _tiles(fused, grid.window, grid.stride),
        _tiles(ir, grid.window, grid.stride),
        _tiles(vis_y, grid.window, grid.stride),
        w, cfg,
    )
    return per_window.mean()


def feature_loss(
    fused_set: FusedSet,
    ir_maps: Sequence[torch.Tensor],
    vis_maps: Sequence[torch.Tensor],
    cfg: LossConfig = LossConfig(),
    log_size: int = 7,
    log_sigma: float = 1.0,
) -> torch.Tensor:
    """
    Hierarchical feature loss over the five fusion blocks

    ir_maps / vis_maps are the feature maps each block consumed, at the
    block's output resolution (NetOutput.ir_inputs / vis_inputs). Each
    block adds lambda_t * (mean squared LoG difference to the visible map
    + eta * mean squared difference to the infrared map).
    """
    if not (len(fused_set) == len(ir_maps) == len(vis_maps) == len(cfg.lambda_t)):
        raise ShapeError("feature_loss needs one infrared and one visible map per fusion block")
    total = fused_set[0].new_zeros(())
    for lam, m, f_ir, f_vis in zip(cfg.lambda_t, fused_set, ir_maps, vis_maps):
        _check_same(m, f_ir, f_vis)
        if lam == 0:
            continue
        grad_diff = laplacian_of_gaussian(m, log_size, log_sigma) - laplacian_of_gaussian(f_vis, log_size, log_sigma)
        total = total + lam * (grad_diff.pow(2).mean() + cfg.eta * (m - f_ir).pow(2).mean())
    return total


def gram(features: torch.Tensor) -> torch.Tensor:
    """Batched Gram matrix normalised by C * H * W; N x C x H x W -> N x C x C"""
    n, c, h, w = features.shape
    flat = features.reshape(n, c, h * w)
    return torch.bmm(flat, flat.transpose(1, 2)) / (c * h * w)


def style_loss(fused: torch.Tensor, ir: torch.Tensor, backbone: VGGBackbone) -> torch.Tensor:
    """Sum over the first two VGG stages of the mean squared Gram difference to the infrared image"""
    fused, ir = _as_batch(fused), _as_batch(ir)
    _check_same(fused, ir)
    with torch.no_grad():
        feats_ir = extract_features(ir, backbone, STYLE_STAGES)
    feats_fused = extract_features(fused, backbone, STYLE_STAGES)
    total = fused.new_zeros(())
    for phi_ir, phi_fused in zip(feats_ir, feats_fused):
        total = total + (gram(phi_ir) - gram(phi_fused)).pow(2).mean().to(fused.dtype)
    return total


def total_loss(
    out: NetOutput,
    ir: torch.Tensor,
    vis_y: torch.Tensor,
    weights: Weights,
    grids: Grids,
    backbone: VGGBackbone,
    cfg: LossConfig = LossConfig(),
) -> Tuple[torch.Tensor, LossBreakdown]:
    """
    L_total = L_pixel + alpha * L_feature + beta * L_style, L_pixel = L_image + gamma * L_patch

    Returns:
        (differentiable total, LossBreakdown of detached floats)
    """
    image = image_loss(out.fused, ir, vis_y, weights, cfg)
    patch = patch_loss(out.fused, ir, vis_y, grids, cfg)
    pixel = image + cfg.gamma * patch
    feature = feature_loss(out.fused_set, out.ir_inputs, out.vis_inputs, cfg)
    style = style_loss(out.fused, ir, backbone) if cfg.beta > 0 else out.fused.new_zeros(())
    total = pixel + cfg.alpha * feature + cfg.beta * style

    weight_list = [weights] * out.fused.shape[0] if isinstance(weights, WeightSet) else list(weights)
    grid_list = [grids] * out.fused.shape[0] if isinstance(grids, PatchWeightGrid) else list(grids)
    breakdown = LossBreakdown(
        total=float(total.detach()),
        pixel=float(pixel.detach()),
        image=float(image.detach()),
        patch=float(patch.detach()),
        feature=float(feature.detach()),
        style=float(style.detach()),
        weights=weight_list,
        grids=grid_list,
    )
    return total, breakdown


class LossService:
    """Binds the frozen backbone and loss constants for the training loop"""

    def __init__(self, backbone: VGGBackbone, cfg: LossConfig):
        if backbone.depth < STYLE_STAGES:
            raise PreconditionError(f"Style loss needs {STYLE_STAGES} backbone stages, got {backbone.depth}")
        self.backbone = backbone
        self.cfg = cfg

    def __call__(
        self,
        out: NetOutput,
        ir: torch.Tensor,
        vis_y: torch.Tensor,
        weights: List[WeightSet],
        grids: List[PatchWeightGrid],
    ) -> Tuple[torch.Tensor, LossBreakdown]:
        return total_loss(out, ir, vis_y, weights, grids, self.backbone, self.cfg)
