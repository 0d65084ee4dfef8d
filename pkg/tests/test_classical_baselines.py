"""
Tests for the Otsu, watershed and Hough counting baselines
"""

import numpy as np
import pytest

from pidcount.classical_baselines import (
    BaselineParams,
    Circle,
    circles_to_mask,
    hough_circle_count,
    otsu_count,
    otsu_mask,
    otsu_threshold,
    otsu_threshold_bin,
    quantize,
    run_baseline,
    sobel_edges,
    to_gray,
    watershed_count,
)
from pidcount.errors import ConfigurationError, DegenerateInputError
from pidcount.postproc_counting import PostprocParams
from tests.conftest import disk_image, exhaustive_otsu

HOUGH = BaselineParams(hough_radius_range=(6, 10, 1))


class TestOtsu:
    def test_matches_exhaustive_scan(self, rng):
        for trial in range(100):
            histogram = rng.integers(0, 60, size=256)
            if trial % 4 == 0:
                histogram[rng.random(256) < 0.7] = 0
            histogram[rng.integers(256)] += 1
            histogram[rng.integers(256)] += 1
            if np.count_nonzero(histogram) < 2:
                continue
            assert otsu_threshold_bin(histogram) == exhaustive_otsu(histogram)

    def test_bimodal_threshold_between_modes(self):
        gray = np.full((8, 8), 10 / 255)
        gray[:, 4:] = 200 / 255
        threshold = otsu_threshold(gray)
        assert 10 / 255 < threshold < 200 / 255

    def test_two_values_split_exactly(self):
        gray = np.zeros((6, 6))
        gray[1:4, 2:5] = 1.0
        np.testing.assert_array_equal(otsu_mask(gray), gray.astype(bool))
        np.testing.assert_array_equal(otsu_mask(gray, foreground_bright=False), ~gray.astype(bool))

    def test_random_image_uses_its_histogram(self, rng):
        gray = rng.random((20, 20))
        histogram = np.bincount(quantize(gray).ravel(), minlength=256)
        assert otsu_threshold(gray) == pytest.approx((exhaustive_otsu(histogram) + 0.5) / 255)

    def test_constant_image(self):
        with pytest.raises(DegenerateInputError):
            otsu_threshold(np.full((4, 4), 0.3))
        count, labels, mask = otsu_count(np.full((4, 4), 0.3))
        assert count == 0 and labels.count == 0 and not mask.any()

    def test_counts_disks(self):
        gray = disk_image(48, [(12, 12), (12, 36), (36, 24)], radius=5)
        count, labels, _ = otsu_count(gray)
        assert count == 3 and labels.count == 3

    def test_dark_foreground(self):
        gray = 1.0 - disk_image(32, [(16, 16)], radius=6)
        assert otsu_count(gray, BaselineParams(foreground_bright=False))[0] == 1


class TestWatershed:
    def test_single_disk(self):
        count, labels = watershed_count(disk_image(32, [(16, 16)], radius=8))
        assert count == 1 and labels.count == 1

    def test_touching_disks_split_at_neck(self):
        gray = disk_image(40, [(20, 13), (20, 27)], radius=8)
        count, labels = watershed_count(gray)
        assert count == 2
        assert labels.labels[20, 13] != labels.labels[20, 27]
        assert labels.labels[20, 13] > 0 and labels.labels[20, 27] > 0

    def test_blank(self):
        assert watershed_count(np.zeros((16, 16)))[0] == 0

    def test_labels_are_consecutive(self):
        gray = disk_image(48, [(12, 12), (36, 36)], radius=6)
        count, labels = watershed_count(gray)
        assert count == 2
        assert set(np.unique(labels.labels)) == {0, 1, 2}


class TestHough:
    def test_single_circle(self):
        count, circles = hough_circle_count(disk_image(48, [(24, 24)], radius=8), HOUGH)
        assert count == 1
        (circle,) = circles
        assert abs(circle.cy - 24) <= 1 and abs(circle.cx - 24) <= 1
        assert abs(circle.radius - 8) <= 1

    def test_two_separated_circles(self):
        count, circles = hough_circle_count(disk_image(48, [(14, 14), (34, 34)], radius=8), HOUGH)
        assert count == 2
        centres = sorted((c.cy, c.cx) for c in circles)
        assert abs(centres[0][0] - 14) <= 1 and abs(centres[1][0] - 34) <= 1

    def test_blank(self):
        assert hough_circle_count(np.zeros((32, 32)), HOUGH) == (0, [])

    def test_flat_image_has_no_edges(self):
        assert not sobel_edges(np.full((8, 8), 0.7)).any()

    @pytest.mark.parametrize("level", [0.15, 0.5, 0.7, 1.0])
    def test_uniform_background_counts_zero(self, level):
        gray = np.full((32, 32), level)
        assert hough_circle_count(gray, BaselineParams(hough_radius_range=(3, 6, 1))) == (0, [])
        assert run_baseline("hough", gray, HOUGH).count == 0

    def test_circles_to_mask(self):
        mask = circles_to_mask([Circle(cy=5, cx=5, radius=2, score=1.0)], (11, 11))
        assert mask[5, 5] == 1 and mask[0, 0] == 0
        assert mask.sum() == 9 or mask.sum() == 13


class TestRunBaseline:
    @pytest.mark.parametrize("method", ["otsu", "watershed", "hough"])
    def test_result_shapes(self, method):
        gray = disk_image(48, [(24, 24)], radius=8)
        result = run_baseline(method, gray, HOUGH)
        assert result.count == 1
        assert result.mask.shape == (48, 48) and result.mask.dtype == np.uint8
        assert result.labels.count == result.count

    def test_unknown_method(self):
        with pytest.raises(ConfigurationError):
            run_baseline("sift", np.zeros((8, 8)))

    def test_color_input(self):
        gray = disk_image(32, [(16, 16)], radius=6)
        rgb = np.repeat(gray[:, :, None], 3, axis=2)
        np.testing.assert_allclose(to_gray(rgb), gray, atol=1e-6)
        assert run_baseline("otsu", rgb).count == 1


class TestBaselineParams:
    @pytest.mark.parametrize("kwargs", [
        {"hough_radius_range": (5, 5, 1)},
        {"hough_radius_range": (0, 4, 1)},
        {"hough_threshold": 0.0},
        {"edge_threshold": 1.0},
        {"watershed_min_distance": 0},
    ])
    def test_rejects(self, kwargs):
        with pytest.raises(ConfigurationError):
            BaselineParams(**kwargs)

    def test_radii(self):
        np.testing.assert_array_equal(BaselineParams(hough_radius_range=(2, 8, 3)).radii, [2, 5, 8])

    def test_postproc_is_shared(self):
        params = BaselineParams(postproc=PostprocParams(min_area=500))
        assert otsu_count(disk_image(32, [(16, 16)], radius=6), params)[0] == 0
