"""Tests for slide packages: writing, validation, reads, sampling, masks and overlays."""

import json

import numpy as np
import pytest

from app.models.slide import OverlayRegion, StainRecord, TissueMask
from app.services.slide_io import (
    MANIFEST_NAME,
    downsample_2x,
    open_slide,
    read_level,
    read_mask,
    read_region,
    region_outline,
    render_overlay,
    sample_patches,
    sample_pixels,
    tile_name,
    write_mask,
    write_slide,
    write_stain_record,
)
from tests.conftest import make_rgb_tile


@pytest.fixture()
def image():
    return make_rgb_tile(200, 300, seed=1)


@pytest.fixture()
def package(tmp_path, image):
    return write_slide(tmp_path / "pkg", image, mpp=0.5, label="3+4", tile_size=64, n_levels=3)


class TestWriteAndOpen:

    def test_levels_halve(self, package):
        sizes = [(info.width, info.height) for info in package.levels]
        assert sizes == [(300, 200), (150, 100), (75, 50)]
        assert [info.downsample for info in package.levels] == [1, 2, 4]

    def test_open_round_trip(self, package, image):
        slide = open_slide(package.root)
        assert slide.mpp == 0.5
        assert slide.label == "3+4"
        np.testing.assert_array_equal(read_level(slide, 0), image)

    def test_lower_level_is_box_average(self, package, image):
        np.testing.assert_array_equal(read_level(package, 1), downsample_2x(image))

    def test_default_pyramid_stops_at_min_level_size(self, tmp_path):
        slide = write_slide(tmp_path / "p", make_rgb_tile(520, 600), mpp=1.0, tile_size=256)
        assert [info.width for info in slide.levels] == [600, 300, 150]

    def test_rejects_non_rgb(self, tmp_path):
        with pytest.raises(ValueError):
            write_slide(tmp_path / "p", np.zeros((10, 10), dtype=np.uint8), mpp=1.0)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ValueError, match="invalid package"):
            open_slide(tmp_path)

    def test_corrupt_manifest(self, package):
        (package.root / MANIFEST_NAME).write_text("{not json", encoding="utf-8")
        with pytest.raises(ValueError, match="invalid package"):
            open_slide(package.root)

    def test_all_missing_tiles_listed(self, package):
        first, second = tile_name(0, 0, 1), tile_name(2, 0, 0)
        (package.root / first).unlink()
        (package.root / second).unlink()
        with pytest.raises(ValueError, match="invalid package") as exc:
            open_slide(package.root)
        assert first in str(exc.value) and second in str(exc.value)

    def test_dimension_mismatch(self, package):
        path = package.root / MANIFEST_NAME
        manifest = json.loads(path.read_text(encoding="utf-8"))
        manifest["levels"][1]["width"] = 151
        path.write_text(json.dumps(manifest), encoding="utf-8")
        with pytest.raises(ValueError, match="manifest mismatch"):
            open_slide(package.root)

    def test_stain_record_persists(self, package):
        record = StainRecord(entries=[float(i) for i in range(9)], lam=2.0, prior_id="ruifrok-hed")
        write_stain_record(package, record)
        assert open_slide(package.root).stain_record == record


class TestRegions:

    def test_region_across_tiles(self, package, image):
        np.testing.assert_array_equal(read_region(package, 0, 50, 60, 100, 90), image[60:150, 50:150])

    def test_region_out_of_bounds(self, package):
        with pytest.raises(ValueError, match="out of bounds"):
            read_region(package, 0, 250, 0, 100, 10)

    def test_unknown_level(self, package):
        with pytest.raises(ValueError):
            read_region(package, 5, 0, 0, 1, 1)


class TestSampling:

    def setup_method(self):
        labels = np.zeros((50, 75), dtype=np.uint8)
        labels[10:30, 20:40] = 1
        self.mask = TissueMask(level=2, labels=labels)

    def test_patch_centers_on_tumor(self, package):
        patches = sample_patches(package, self.mask, 40, 16, seed=3)
        assert len(patches) == 40
        for p in patches:
            cx, cy = p.center
            assert self.mask.labels[cy // 4, cx // 4] == 1
            assert p.pixels.shape == (16, 16, 3)

    def test_patches_match_region_reads(self, package, image):
        p = sample_patches(package, self.mask, 1, 16, seed=4)[0]
        np.testing.assert_array_equal(p.pixels, image[p.y:p.y + 16, p.x:p.x + 16])

    def test_deterministic(self, package):
        a = [(p.x, p.y) for p in sample_patches(package, self.mask, 10, 16, seed=5)]
        b = [(p.x, p.y) for p in sample_patches(package, self.mask, 10, 16, seed=5)]
        assert a == b

    def test_empty_mask(self, package):
        empty = TissueMask(level=2, labels=np.zeros((50, 75), dtype=np.uint8))
        with pytest.raises(ValueError, match="no tumor region"):
            sample_patches(package, empty, 5, 16)

    def test_pixels_from_tumor(self, package, image):
        pixels = sample_pixels(package, self.mask, 500, seed=6)
        allowed = {tuple(v) for v in image[40:120, 80:160].reshape(-1, 3)}
        assert pixels.shape == (500, 3)
        assert all(tuple(v) in allowed for v in pixels)

    def test_pixels_count_exact(self, package):
        assert sample_pixels(package, self.mask, 333, seed=7).shape == (333, 3)

    @pytest.mark.parametrize("shape", [(50, 74), (49, 75), (100, 150)])
    def test_mask_must_match_its_level(self, package, shape):
        labels = np.zeros(shape, dtype=np.uint8)
        labels[10:30, 20:40] = 1
        mask = TissueMask(level=2, labels=labels)
        with pytest.raises(ValueError, match="does not match level 2"):
            sample_patches(package, mask, 5, 16)
        with pytest.raises(ValueError, match="does not match level 2"):
            sample_pixels(package, mask, 5, seed=0)

    def test_pixels_cover_footprint_edges(self, tmp_path):
        # Level 0 is 201 x 301; level 1 drops the odd trailing row and column.
        image = make_rgb_tile(201, 301, seed=2)
        slide = write_slide(tmp_path / "odd", image, mpp=1.0, tile_size=64, n_levels=2)
        labels = np.zeros((100, 150), dtype=np.uint8)
        labels[-1, -1] = 1
        pixels = sample_pixels(slide, TissueMask(level=1, labels=labels), 200, seed=1)
        allowed = {tuple(v) for v in image[198:200, 298:300].reshape(-1, 3)}
        assert pixels.shape == (200, 3)
        assert all(tuple(v) in allowed for v in pixels)


class TestMasksAndOverlays:

    def test_mask_round_trip(self, tmp_path):
        labels = np.random.default_rng(0).integers(0, 4, size=(20, 30)).astype(np.uint8)
        path = write_mask(TissueMask(level=3, labels=labels), tmp_path / "m.png")
        restored = read_mask(path)
        assert restored.level == 3
        np.testing.assert_array_equal(restored.labels, labels)

    def test_outline_is_two_pixels_wide(self):
        mask = np.zeros((20, 20), dtype=bool)
        mask[5:15, 5:15] = True
        outline = region_outline(mask)
        assert outline.sum() == 100 - 36
        assert not outline[9, 9]

    def test_overlay_colors_outline_only(self):
        base = np.full((20, 20, 3), 200, dtype=np.uint8)
        out = render_overlay(base, [OverlayRegion.rectangle("4", 2, 3, 10, 8)])
        assert tuple(out[3, 2]) == (0, 0, 255)
        assert tuple(out[7, 6]) == (200, 200, 200)
        assert tuple(base[3, 2]) == (200, 200, 200)

    def test_overlay_clips_at_border(self):
        base = np.zeros((10, 10, 3), dtype=np.uint8)
        out = render_overlay(base, [OverlayRegion.rectangle("3", 6, 6, 10, 10)])
        assert tuple(out[6, 9]) == (0, 255, 0)
