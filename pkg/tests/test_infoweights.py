import math

import numpy as np
import pytest
import torch
from scipy.ndimage import correlate

from models.exceptions import PreconditionError, ShapeError
from models.schemas import InfoConfig, PatchWeightGrid, PerceptualFeatures, WeightSet
from services.backbone_service import extract_features
from services.weight_service import (
    WeightService, feature_entropy, gradient_statistic, image_weights, intensity_statistic,
    log_gradient_energy, patch_weights, tempered_softmax,
)
from utils.filters import log_kernel


def _entropy_oracle(channel: np.ndarray, bins: int = 256) -> float:
    lo, hi = channel.min(), channel.max()
    if hi == lo:
        return 0.0
    counts = np.zeros(bins)
    for v in channel.ravel():
        counts[min(int(np.floor((v - lo) / (hi - lo) * bins)), bins - 1)] += 1
    p = counts[counts > 0] / channel.size
    return float(-(p * np.log2(p)).sum())


def test_entropy_anchors():
    assert feature_entropy(np.full((8, 8), 3.0)) == 0.0
    half = np.zeros((8, 8))
    half[:, 4:] = 1.0
    assert feature_entropy(half) == pytest.approx(1.0, abs=1e-12)
    ramp = np.arange(256, dtype=np.float64).reshape(16, 16)
    assert feature_entropy(ramp) == pytest.approx(8.0, abs=1e-12)


def test_entropy_matches_histogram_oracle(rng):
    fmap = rng.normal(size=(20, 20))
    assert feature_entropy(fmap) == pytest.approx(_entropy_oracle(fmap), abs=1e-9)


def test_entropy_rejects_non_finite():
    fmap = np.zeros((4, 4))
    fmap[0, 0] = np.nan
    with pytest.raises(PreconditionError):
        feature_entropy(fmap)


def test_log_energy_of_constant_is_zero():
    assert log_gradient_energy(np.full((12, 12), 0.7)) == pytest.approx(0.0, abs=1e-20)


def test_log_energy_matches_replicate_oracle(rng):
    fmap = rng.random((15, 13))
    kernel = log_kernel(7, 1.0, dtype=torch.float64).numpy()
    response = correlate(fmap, kernel, mode="nearest")
    assert log_gradient_energy(fmap) == pytest.approx((response ** 2).mean(), rel=1e-10)


def test_log_energy_needs_kernel_support():
    with pytest.raises(PreconditionError):
        log_gradient_energy(np.zeros((6, 20)))


def test_tempered_softmax():
    a, b = tempered_softmax(2.0, 1.0, 1.0)
    assert a + b == pytest.approx(1.0, abs=1e-15)
    assert a == pytest.approx(math.e / (math.e + 1.0))
    assert tempered_softmax(5.0, 5.0, 3e3) == (0.5, 0.5)
    big = tempered_softmax(1e6, -1e6, 1.0)
    assert big == (1.0, 0.0)
    with pytest.raises(PreconditionError):
        tempered_softmax(1.0, 2.0, 0.0)


def test_weights_normalised_on_random_pairs(rng, backbone, info_cfg):
    for _ in range(100):
        ir = rng.random((42, 42))
        vis = rng.random((42, 42)) * rng.random()
        w = image_weights(ir, vis, backbone, info_cfg)
        assert abs(w.int_ir + w.int_vis - 1.0) <= 1e-6
        assert abs(w.grad_ir + w.grad_vis - 1.0) <= 1e-6
        for cell in patch_weights(ir, vis, info_cfg).cells:
            assert abs(cell.int_ir + cell.int_vis - 1.0) <= 1e-6
            assert abs(cell.grad_ir + cell.grad_vis - 1.0) <= 1e-6


def test_identical_inputs_give_half(pair, backbone, info_cfg):
    assert image_weights(pair.ir, pair.ir, backbone, info_cfg).as_tuple() == (0.5, 0.5, 0.5, 0.5)
    grid = patch_weights(pair.vis_y, pair.vis_y, info_cfg)
    assert all(cell.as_tuple() == (0.5, 0.5, 0.5, 0.5) for cell in grid.cells)


def test_swapping_modalities_swaps_weights(pair, backbone, info_cfg):
    forward = image_weights(pair.ir, pair.vis_y, backbone, info_cfg)
    backward = image_weights(pair.vis_y, pair.ir, backbone, info_cfg)
    assert backward.as_tuple() == pytest.approx(forward.swapped().as_tuple(), abs=1e-12)


def test_image_weights_shape_mismatch(backbone, info_cfg):
    with pytest.raises(ShapeError):
        image_weights(np.zeros((32, 32)), np.zeros((32, 40)), backbone, info_cfg)


def test_patch_grid_geometry(rng, info_cfg):
    grid = patch_weights(rng.random((64, 64)), rng.random((64, 64)), info_cfg)
    assert (grid.rows, grid.cols) == (3, 3)
    assert grid.origins[:4] == [(0, 0), (0, 21), (0, 42), (21, 0)]

    partial = patch_weights(rng.random((50, 47)), rng.random((50, 47)), info_cfg)
    assert (partial.rows, partial.cols) == (2, 2)


def test_patch_weights_too_small(info_cfg):
    with pytest.raises(PreconditionError):
        patch_weights(np.zeros((20, 64)), np.zeros((20, 64)), info_cfg)


def test_patch_cell_matches_window_oracle(rng):
    cfg = InfoConfig(c_int=0.05, c_grad=0.5)
    ir, vis = rng.random((42, 42)), rng.random((42, 42)) ** 2
    grid = patch_weights(ir, vis, cfg)
    kernel = log_kernel(7, 1.0, dtype=torch.float64).numpy()

    y, x = grid.origins[3]
    wi, wv = ir[y:y + 21, x:x + 21], vis[y:y + 21, x:x + 21]
    int_ir = wi.mean() + cfg.delta * wi.std()
    int_vis = wv.mean() + cfg.delta * wv.std()
    grad_ir = (correlate(wi, kernel, mode="nearest") ** 2).mean()
    grad_vis = (correlate(wv, kernel, mode="nearest") ** 2).mean()
    expected_int = math.exp(int_ir / cfg.c_int) / (math.exp(int_ir / cfg.c_int) + math.exp(int_vis / cfg.c_int))
    expected_grad = math.exp(grad_ir / cfg.c_grad) / (math.exp(grad_ir / cfg.c_grad) + math.exp(grad_vis / cfg.c_grad))

    cell = grid.cell(1, 1)
    assert cell.int_ir == pytest.approx(expected_int, rel=1e-9)
    assert cell.grad_ir == pytest.approx(expected_grad, rel=1e-9)


def test_brighter_window_gets_more_intensity_weight(rng):
    cfg = InfoConfig(c_int=0.1)
    vis = rng.random((21, 21)) * 0.3
    ir = vis + 0.5
    cell = patch_weights(ir, vis, cfg).cells[0]
    assert cell.int_ir > cell.int_vis


def test_sharper_window_gets_more_gradient_weight(rng):
    cfg = InfoConfig(c_grad=0.1)
    textured = rng.random((21, 21))
    flat = np.full((21, 21), 0.5)
    cell = patch_weights(flat, textured, cfg).cells[0]
    assert cell.grad_vis > cell.grad_ir


def _stat_oracle(stages, delta):
    per_stage = []
    for stage in stages:
        maps = stage.double().numpy()
        per_stage.append(np.mean([_entropy_oracle(c) + delta * c.std() for c in maps]))
    return float(np.mean(per_stage))


def test_intensity_statistic_averages_three_stages(backbone_deep, rng):
    cfg = InfoConfig(depth=3)
    img = torch.from_numpy(rng.random((32, 32)))
    feats = backbone_deep.perceptual_features(img, "ir", depth=3)
    assert feats.depth == 3
    stages = [s[0] for s in extract_features(img, backbone_deep, 3)]
    assert intensity_statistic(feats, cfg) == pytest.approx(_stat_oracle(stages, cfg.delta), rel=1e-6)


def test_gradient_statistic_is_stage_mean(backbone, rng):
    cfg = InfoConfig()
    img = torch.from_numpy(rng.random((32, 32)))
    feats = backbone.perceptual_features(img, "vis")
    per_stage = [
        np.mean([log_gradient_energy(channel) for channel in stage.double().numpy()])
        for stage in feats.stages
    ]
    assert gradient_statistic(feats, cfg) == pytest.approx(np.mean(per_stage), rel=1e-9)


def test_weight_service_fixed_switches(backbone, rng):
    ir = torch.rand(2, 1, 42, 42)
    vis = torch.rand(2, 1, 42, 42)
    service = WeightService(backbone, InfoConfig(), fixed_image_weights=True)
    weights, grids = service.batch(ir, vis)
    assert all(w == WeightSet.uniform() for w in weights)
    assert len(grids) == 2 and grids[0].rows == 2

    service = WeightService(backbone, InfoConfig(), fixed_patch_weights=True)
    _, grids = service.batch(ir, vis)
    assert grids[0] == PatchWeightGrid.uniform(42, 42)


def test_weight_service_needs_deep_enough_backbone(backbone):
    with pytest.raises(PreconditionError):
        WeightService(backbone, InfoConfig(depth=3))


def test_common_brightness_shift_leaves_gradient_weights(rng):
    cfg = InfoConfig(c_grad=0.05)
    ir = rng.random((63, 63)) * 0.5
    vis = rng.random((63, 63)) ** 2 * 0.5
    base = patch_weights(ir, vis, cfg)
    shifted = patch_weights(ir + 0.3, vis + 0.3, cfg)
    assert len(base.cells) == 9
    for a, b in zip(base.cells, shifted.cells):
        assert b.grad_ir == pytest.approx(a.grad_ir, abs=1e-9)
        assert b.grad_vis == pytest.approx(a.grad_vis, abs=1e-9)


def test_common_offset_leaves_image_gradient_statistic(pair, backbone, info_cfg):
    feats = backbone.perceptual_features(pair.vis_y, "vis")
    base = PerceptualFeatures(stages=[s.double() for s in feats.stages], source_tag="vis")
    lifted = PerceptualFeatures(stages=[s.double() + 2.5 for s in feats.stages], source_tag="vis")
    assert gradient_statistic(lifted, info_cfg) == pytest.approx(gradient_statistic(base, info_cfg), rel=1e-9)
    assert tempered_softmax(4.0 + 7.0, 1.0 + 7.0, 2.0) == pytest.approx(tempered_softmax(4.0, 1.0, 2.0), abs=1e-12)


def test_more_visible_texture_never_lowers_visible_gradient_weight(rng):
    cfg = InfoConfig(c_grad=0.5)
    ir = rng.random((63, 63))
    texture = rng.random((63, 63)) - 0.5
    history = []
    for gain in (0.25, 0.5, 0.75, 1.0):
        grid = patch_weights(ir, 0.5 + gain * texture, cfg)
        history.append([cell.grad_vis for cell in grid.cells])
    for weaker, stronger in zip(history, history[1:]):
        assert all(s >= w for w, s in zip(weaker, stronger))
    assert all(s > w for w, s in zip(history[0], history[-1]))


def test_scaling_visible_features_never_lowers_image_gradient_weight(pair, backbone, info_cfg):
    feats_ir = backbone.perceptual_features(pair.ir, "ir")
    feats_vis = backbone.perceptual_features(pair.vis_y, "vis")
    stat_ir = gradient_statistic(feats_ir, info_cfg)
    weights = []
    for gain in (0.5, 1.0, 2.0, 4.0):
        scaled = PerceptualFeatures(stages=[gain * s.double() for s in feats_vis.stages], source_tag="vis")
        weights.append(tempered_softmax(stat_ir, gradient_statistic(scaled, info_cfg), info_cfg.c_grad)[1])
    assert weights == sorted(weights)
    assert weights[-1] > weights[0]


def test_textured_visible_wins_image_gradient_weight(pair, backbone, info_cfg):
    feats_ir = backbone.perceptual_features(pair.ir, "ir")
    feats_vis = backbone.perceptual_features(pair.vis_y, "vis")
    assert gradient_statistic(feats_vis, info_cfg) > gradient_statistic(feats_ir, info_cfg)
    w = image_weights(pair.ir, pair.vis_y, backbone, info_cfg)
    assert w.grad_vis > 0.5 > w.grad_ir
