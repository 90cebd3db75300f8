"""Tests for K-means tumor masking and the mask overlap metrics."""

import numpy as np
import pytest

from app.services.tumor_mask import (
    TUMOR_LABEL,
    cluster_labels,
    dice,
    downsample_truth,
    extract_tumor_mask,
    iou,
    rank_clusters,
    upsample_mask,
)
from app.services.synth import synth_slide
from tests.conftest import make_synth_spec


class TestRanking:

    def test_descending_blue(self):
        pixels = np.array([[0, 0, 100], [0, 0, 250], [0, 0, 180]])
        ranks = rank_clusters(pixels, np.array([0, 1, 2]), 3)
        assert list(ranks) == [2, 0, 1]

    def test_tie_goes_to_larger_cluster(self):
        pixels = np.array([[0, 0, 200], [0, 0, 200], [0, 0, 200], [0, 0, 50]])
        ranks = rank_clusters(pixels, np.array([0, 1, 1, 2]), 3)
        assert list(ranks) == [1, 0, 2]

    def test_weights_count_as_population(self):
        pixels = np.array([[0, 0, 200], [0, 0, 200]])
        ranks = rank_clusters(pixels, np.array([0, 1]), 2, weights=np.array([1, 5]))
        assert list(ranks) == [1, 0]


class TestClusterLabels:

    def setup_method(self):
        self.rgb = np.zeros((12, 12, 3), dtype=np.uint8)
        self.rgb[:, :4] = (255, 255, 255)
        self.rgb[:, 4:8] = (90, 90, 200)
        self.rgb[:, 8:] = (200, 60, 60)

    def test_second_bluest_is_tumor(self):
        labels = cluster_labels(self.rgb, 3, seed=0)
        assert np.all(labels[:, :4] == 0)
        assert np.all(labels[:, 4:8] == TUMOR_LABEL)
        assert np.all(labels[:, 8:] == 2)

    def test_labels_independent_of_seed(self):
        np.testing.assert_array_equal(cluster_labels(self.rgb, 3, seed=1), cluster_labels(self.rgb, 3, seed=99))

    def test_rejects_other_k(self):
        with pytest.raises(ValueError):
            cluster_labels(self.rgb, 5)

    def test_too_few_colors(self):
        with pytest.raises(ValueError, match="insufficient distinct points"):
            cluster_labels(np.full((4, 4, 3), 255, dtype=np.uint8), 3)


class TestExtract:

    def test_mask_on_lowest_level(self, tmp_slide):
        slide, _ = tmp_slide
        mask = extract_tumor_mask(slide, k=3, seed=0)
        info = slide.level_info(slide.lowest_level)
        assert mask.level == slide.lowest_level
        assert mask.labels.shape == (info.height, info.width)
        assert 0.0 < mask.tumor_fraction < 1.0

    def test_downsampled_clustering_keeps_shape(self, tmp_slide):
        slide, _ = tmp_slide
        mask = extract_tumor_mask(slide, k=3, seed=0, max_pixels=1000)
        info = slide.level_info(slide.lowest_level)
        assert mask.labels.shape == (info.height, info.width)

    def test_deterministic(self, tmp_slide):
        slide, _ = tmp_slide
        a = extract_tumor_mask(slide, seed=2)
        b = extract_tumor_mask(slide, seed=2)
        np.testing.assert_array_equal(a.labels, b.labels)


class TestResampling:

    def test_upsample_pads_to_shape(self):
        out = upsample_mask(np.array([[1, 0], [0, 1]]), 2, (5, 5))
        assert out.shape == (5, 5)
        assert out[4, 4] == 1 and out[0, 3] == 0

    def test_downsample_majority(self):
        truth = np.zeros((4, 4), dtype=bool)
        truth[:2, :2] = True
        truth[2, 2] = True
        np.testing.assert_array_equal(downsample_truth(truth, 2), [[True, False], [False, False]])


class TestOverlap:

    def test_known_values(self):
        a = np.array([1, 1, 0, 0], dtype=bool)
        b = np.array([1, 0, 1, 0], dtype=bool)
        assert dice(a, b) == 0.5
        assert iou(a, b) == pytest.approx(1 / 3)

    def test_empty_masks_agree(self):
        z = np.zeros(3, dtype=bool)
        assert dice(z, z) == 1.0 and iou(z, z) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            dice(np.zeros(3, dtype=bool), np.zeros(4, dtype=bool))


@pytest.mark.slow
@pytest.mark.parametrize("k, marker, floor", [(3, False, 0.80), (4, True, 0.75)])
def test_mask_dice_on_synthetic_corpus(tmp_path, k, marker, floor):
    for seed in range(20):
        spec = make_synth_spec(kind="grade4" if seed % 2 else "grade3", marker=marker, seed=100 + seed)
        slide, truth = synth_slide(spec, tmp_path / f"s{seed}", tile_size=256)
        mask = extract_tumor_mask(slide, k=k, seed=seed)
        f = slide.level_info(mask.level).downsample
        reference = downsample_truth(truth.tumor, f)[:mask.height, :mask.width]
        assert dice(mask.tumor, reference) >= floor, f"slide seed {spec.seed}"
