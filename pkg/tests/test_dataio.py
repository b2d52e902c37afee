import logging

import numpy as np
import pytest
from PIL import Image
from scipy.stats import chisquare

from models.exceptions import DatasetError, EmptyManifestError, PreconditionError, ShapeError
from services.dataset_service import (
    PatchSampler, crop_origin, crop_patch, export_manifest, make_pair, make_synthetic_pair,
    read_manifest, scan_dataset,
)
from services.metric_service import ag
from utils.color import rgb_to_ycbcr, ycbcr_to_rgb
from utils.image_io import read_image, save_image


def test_gray_rgb_has_neutral_chroma():
    img = np.full((4, 5, 3), 0.4)
    y, cb, cr = rgb_to_ycbcr(img)
    assert np.allclose(y, 0.4)
    assert np.allclose(cb, 0.5)
    assert np.allclose(cr, 0.5)


def test_ycbcr_inverts(rng):
    img = rng.random((8, 8, 3))
    assert np.allclose(ycbcr_to_rgb(*rgb_to_ycbcr(img)), img, atol=1e-9)


def test_rgb_to_ycbcr_rejects_gray():
    with pytest.raises(ShapeError):
        rgb_to_ycbcr(np.zeros((4, 4)))


def test_make_pair_gray_visible_uses_neutral_chroma(rng):
    ir = rng.random((16, 16))
    vis = rng.random((16, 16))
    pair = make_pair(ir, vis, "a")
    assert np.array_equal(pair.vis_y, vis)
    assert np.all(pair.vis_cb == 0.5) and np.all(pair.vis_cr == 0.5)
    assert pair.vis.shape == (16, 16, 3)


def test_make_pair_reduces_rgb_infrared_to_luma(rng):
    ir = np.repeat(rng.random((8, 8))[..., None], 3, axis=2)
    pair = make_pair(ir, rng.random((8, 8, 3)), "a")
    assert pair.ir.shape == (8, 8)
    assert np.allclose(pair.ir, ir[..., 0])


def test_make_pair_rejects_unregistered(rng):
    with pytest.raises(ShapeError):
        make_pair(rng.random((8, 8)), rng.random((8, 9, 3)), "a")


def test_read_image_scales(tmp_path):
    path8 = save_image(tmp_path / "a.png", np.full((4, 4), 1.0))
    assert np.allclose(read_image(path8), 1.0)

    path16 = tmp_path / "b.png"
    Image.fromarray(np.full((4, 4), 65535, dtype=np.uint16)).save(path16)
    img = read_image(path16)
    assert img.shape == (4, 4)
    assert np.allclose(img, 1.0)


def test_read_image_missing_file(tmp_path):
    with pytest.raises(DatasetError):
        read_image(tmp_path / "nope.png")


def _write_pair(root, identifier, size=(32, 32), vis_size=None):
    save_image(root / "ir" / f"{identifier}.png", np.full(size, 0.3))
    save_image(root / "vis" / f"{identifier}.png", np.full((*(vis_size or size), 3), 0.6))


def test_scan_paired_dirs_skips_orphans(tmp_path, caplog):
    for identifier in ("b", "a"):
        _write_pair(tmp_path, identifier)
    save_image(tmp_path / "ir" / "lonely.png", np.zeros((32, 32)))

    with caplog.at_level(logging.WARNING):
        manifest = scan_dataset(str(tmp_path), "paired_dirs")

    assert [e.id for e in manifest.entries] == ["a", "b"]
    assert any("lonely" in record.message for record in caplog.records)


def test_scan_suffix_pairs(tmp_path):
    save_image(tmp_path / "x_ir.png", np.zeros((32, 32)))
    save_image(tmp_path / "x_vis.png", np.zeros((32, 32, 3)))
    manifest = scan_dataset(str(tmp_path), "suffix_pairs")
    assert len(manifest) == 1
    assert manifest.entries[0].id == "x"


def test_scan_empty_root(tmp_path):
    (tmp_path / "ir").mkdir()
    (tmp_path / "vis").mkdir()
    with pytest.raises(EmptyManifestError):
        scan_dataset(str(tmp_path))


def test_scan_size_mismatch(tmp_path):
    _write_pair(tmp_path, "a", size=(32, 32), vis_size=(32, 40))
    with pytest.raises(ShapeError):
        scan_dataset(str(tmp_path))


def test_manifest_export_and_read(tmp_path):
    _write_pair(tmp_path, "a")
    manifest = scan_dataset(str(tmp_path))
    path = export_manifest(manifest, tmp_path / "m.jsonl")
    again = read_manifest(str(path))
    assert [e.id for e in again.entries] == ["a"]
    assert read_image(again.entries[0].ir).shape == (32, 32)


def test_crop_patch_cuts_same_window(pair):
    crop = crop_patch(pair, 24, rng_seed=7)
    assert crop.ir.shape == crop.vis_y.shape == (24, 24)
    assert np.array_equal(crop.ir, crop_patch(pair, 24, rng_seed=7).ir)
    # locate the crop origin and check every plane agrees
    found = [
        (y, x) for y in range(pair.height - 23) for x in range(pair.width - 23)
        if np.array_equal(pair.ir[y:y + 24, x:x + 24], crop.ir)
    ]
    y, x = found[0]
    assert np.array_equal(pair.vis_y[y:y + 24, x:x + 24], crop.vis_y)
    assert np.array_equal(pair.vis_cb[y:y + 24, x:x + 24], crop.vis_cb)


def test_crop_larger_than_image(pair):
    with pytest.raises(PreconditionError):
        crop_patch(pair, 65, rng_seed=0)


def test_synthetic_pair_is_deterministic_with_hot_target():
    a = make_synthetic_pair(48, 48, seed=5)
    b = make_synthetic_pair(48, 48, seed=5)
    assert np.array_equal(a.ir, b.ir) and np.array_equal(a.vis, b.vis)
    assert a.ir[a.target_mask].mean() > a.ir[~a.target_mask].mean() + 0.2


def test_synthetic_pair_minimum_size():
    with pytest.raises(PreconditionError):
        make_synthetic_pair(16, 64)


def test_patch_sampler_depends_only_on_seed_and_step():
    pairs = [make_synthetic_pair(40, 40, seed=i) for i in range(3)]
    first = PatchSampler(pairs, crop=32, batch_size=2, seed=11)
    second = PatchSampler(pairs, crop=32, batch_size=2, seed=11)
    batch = first.batch(4)
    assert batch.ir.shape == (2, 1, 32, 32)
    second.batch(0)
    again = second.batch(4)
    assert batch.identifiers == again.identifiers
    assert np.array_equal(batch.ir.numpy(), again.ir.numpy())


def test_patch_sampler_covers_every_pair_per_epoch():
    pairs = [make_synthetic_pair(32, 32, seed=i) for i in range(4)]
    sampler = PatchSampler(pairs, crop=32, batch_size=2, seed=0)
    seen = set()
    for step in range(sampler.steps_per_epoch):
        seen.update(sampler.indices(step).tolist())
    assert seen == {0, 1, 2, 3}


def test_crop_origins_are_uniform():
    origins = np.array([crop_origin(41, 41, 32, rng_seed=seed) for seed in range(10_000)])
    for axis in range(2):
        counts = np.bincount(origins[:, axis], minlength=10)
        assert len(counts) == 10
        assert chisquare(counts).pvalue > 1e-3


def test_crop_origins_stay_inside_the_image():
    pair = make_synthetic_pair(256, 256, seed=0)
    origins = np.array([crop_origin(256, 256, 192, rng_seed=seed) for seed in range(500)])
    assert origins.min() >= 0 and origins.max() <= 64
    assert crop_patch(pair, 192, rng_seed=499).ir.shape == (192, 192)


@pytest.mark.parametrize("rgb, expected", [
    ((1.0, 0.0, 0.0), (0.299, 0.5 - 0.168736, 0.5 + 0.5)),
    ((0.0, 1.0, 0.0), (0.587, 0.5 - 0.331264, 0.5 - 0.418688)),
    ((0.0, 0.0, 1.0), (0.114, 0.5 + 0.5, 0.5 - 0.081312)),
])
def test_primaries_follow_bt601_rows(rgb, expected):
    y, cb, cr = rgb_to_ycbcr(np.full((2, 2, 3), rgb))
    assert (y[0, 0], cb[0, 0], cr[0, 0]) == pytest.approx(expected, abs=1e-6)


def test_synthetic_visible_is_more_textured_than_infrared():
    for seed in range(3):
        pair = make_synthetic_pair(64, 64, seed=seed)
        assert ag(pair.vis_y) > ag(pair.ir)
