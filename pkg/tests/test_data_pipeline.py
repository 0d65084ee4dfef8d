"""
Tests for dataset loading, resizing, augmentation, splitting and synthesis
"""

import logging

import numpy as np
import pytest
from PIL import Image
from scipy import ndimage

from pidcount.data_pipeline import (
    AugmentPolicy,
    Sample,
    augment8,
    augment_dataset,
    load_dataset,
    load_images,
    resize,
    save_dataset,
    split,
    stack_batch,
    synth_blobs,
)
from pidcount.errors import ConfigurationError, DatasetLoadError, DimensionError, GenerationError, ValidationError

EIGHT = np.ones((3, 3), dtype=bool)


def _sample(sample_id="s", size=8, seed=0, channels=1):
    rng = np.random.default_rng(seed)
    mask = (rng.random((size, size)) < 0.4).astype(np.uint8)
    image = rng.random((size, size, channels)).astype(np.float32)
    return Sample(id=sample_id, image=image, mask=mask, count=2)


def _originals(n, size=16):
    return [_sample(f"img_{i:03d}", size=size, seed=i) for i in range(n)]


class TestSample:
    def test_gray_image_gets_channel_axis(self):
        sample = Sample(id="a", image=np.zeros((4, 4)), mask=np.zeros((4, 4), dtype=np.uint8))
        assert sample.image.shape == (4, 4, 1) and sample.image.dtype == np.float32
        assert sample.original_id == "a"

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            Sample(id="a", image=np.zeros((4, 5)), mask=np.zeros((4, 4), dtype=np.uint8))

    def test_non_binary_mask(self):
        with pytest.raises(ValidationError):
            Sample(id="a", image=np.zeros((2, 2)), mask=np.array([[0, 2], [1, 0]]))


class TestLoadDataset:
    def test_three_pairs(self, make_dataset):
        samples = load_dataset(make_dataset(n=3))
        assert [s.id for s in samples] == ["img_000", "img_001", "img_002"]
        assert all(s.count == 1 for s in samples)
        assert samples[0].mask.sum() == 20

    def test_orphan_image_is_named(self, make_dataset):
        directory = make_dataset(n=2)
        Image.fromarray(np.zeros((16, 16), dtype=np.uint8)).save(directory / "images" / "img_007.png")
        with pytest.raises(DatasetLoadError, match="img_007") as info:
            load_dataset(directory)
        assert info.value.orphans == ["img_007"]

    def test_non_image_file_is_skipped(self, make_dataset, caplog):
        directory = make_dataset(n=2)
        (directory / "images" / "notes.txt").write_text("not an image")
        with caplog.at_level(logging.WARNING):
            samples = load_dataset(directory)
        assert len(samples) == 2
        assert "notes.txt" in caplog.text

    def test_missing_folders(self, tmp_path):
        with pytest.raises(DatasetLoadError):
            load_dataset(tmp_path)

    def test_masks_are_thresholded_at_half_gray(self, tmp_path):
        (tmp_path / "images").mkdir()
        (tmp_path / "masks").mkdir()
        Image.fromarray(np.full((2, 2), 90, dtype=np.uint8)).save(tmp_path / "images" / "a.png")
        Image.fromarray(np.array([[127, 128], [0, 255]], dtype=np.uint8)).save(tmp_path / "masks" / "a.png")
        (sample,) = load_dataset(tmp_path)
        np.testing.assert_array_equal(sample.mask, [[0, 1], [0, 1]])
        assert sample.count is None

    def test_round_trip_through_disk(self, tmp_path):
        originals = synth_blobs((2, 4), image_size=32, n_images=3, seed=8)
        loaded = load_dataset(save_dataset(originals, tmp_path / "ds"))
        for before, after in zip(originals, loaded):
            assert before.id == after.id and before.count == after.count
            np.testing.assert_array_equal(before.mask, after.mask)
            np.testing.assert_allclose(before.image, after.image, atol=0.5 / 255 + 1e-6)

    def test_color_round_trip(self, tmp_path):
        original = _sample("rgb", size=16, channels=3)
        (loaded,) = load_dataset(save_dataset([original], tmp_path / "ds"))
        assert loaded.image.shape == (16, 16, 3)

    def test_load_images_without_masks(self, tmp_path):
        Image.fromarray(np.full((16, 16), 200, dtype=np.uint8)).save(tmp_path / "a.png")
        (sample,) = load_images(tmp_path)
        assert sample.id == "a" and not sample.mask.any()
        assert sample.image[0, 0, 0] == pytest.approx(200 / 255)


class TestResize:
    def test_downsize_keeps_mask_binary(self):
        sample = _sample(size=300, channels=3)
        out = resize(sample, 256)
        assert out.image.shape == (256, 256, 3)
        assert out.mask.shape == (256, 256)
        assert set(np.unique(out.mask)) <= {0, 1}
        assert out.id == sample.id and out.count == sample.count

    def test_same_size_is_identity(self):
        sample = _sample(size=32)
        assert resize(sample, 32) is sample

    def test_nearest_mask_matches_index_map(self):
        yy, xx = np.mgrid[0:64, 0:64]
        mask = ((yy // 2 + xx // 2) % 2).astype(np.uint8)
        sample = Sample(id="c", image=mask.astype(np.float32), mask=mask)
        out = resize(sample, 32)
        oy, ox = np.mgrid[0:32, 0:32]
        expected = mask[((oy + 0.5) * 2).astype(int), ((ox + 0.5) * 2).astype(int)]
        np.testing.assert_array_equal(out.mask, expected)
        np.testing.assert_array_equal(out.mask, (oy + ox) % 2)

    @pytest.mark.parametrize("size", [0, 8, 250])
    def test_bad_size(self, size):
        with pytest.raises(ConfigurationError):
            resize(_sample(size=32), size)


def _dihedral(array):
    """The 8 square isometries by explicit coordinate maps"""
    n = array.shape[0]
    maps = [
        lambda i, j: (i, j), lambda i, j: (j, i),
        lambda i, j: (n - 1 - i, j), lambda i, j: (i, n - 1 - j),
        lambda i, j: (n - 1 - i, n - 1 - j), lambda i, j: (j, n - 1 - i),
        lambda i, j: (n - 1 - j, i), lambda i, j: (n - 1 - j, n - 1 - i),
    ]
    results = []
    for mapping in maps:
        out = np.empty_like(array)
        for i in range(n):
            for j in range(n):
                out[i, j] = array[mapping(i, j)]
        results.append(out.tobytes())
    return results


class TestAugment8:
    def test_eight_isometries(self):
        sample = _sample(size=7, seed=3)
        variants = augment8(sample)
        assert len(variants) == 8
        assert len({v.id for v in variants}) == 8
        expected = set(_dihedral(sample.mask))
        assert {v.mask.tobytes() for v in variants} == expected
        for variant in variants:
            assert variant.mask.sum() == sample.mask.sum()
            assert variant.original_id == sample.id
            assert variant.count == sample.count

    def test_image_follows_mask(self):
        sample = _sample(size=6, seed=5)
        sample.image[:, :, 0] = sample.mask
        for variant in augment8(sample):
            np.testing.assert_array_equal(variant.image[:, :, 0], variant.mask)

    def test_id_order(self):
        ids = [v.id for v in augment8(_sample("x"))]
        assert ids[:3] == ["x_rot0", "x_rot0_mirror", "x_rot90"]
        assert ids[-1] == "x_rot270_mirror"

    def test_non_square(self):
        sample = Sample(id="r", image=np.zeros((4, 6)), mask=np.zeros((4, 6), dtype=np.uint8))
        with pytest.raises(ConfigurationError):
            augment8(sample)

    def test_dataset_expansion(self):
        assert len(augment_dataset(_originals(3, size=4))) == 24


class TestSplit:
    def test_largest_remainder_sizes(self):
        result = split(_originals(306, size=4), seed=1, augment_policy="none")
        assert (len(result.train), len(result.val), len(result.test)) == (184, 61, 61)

    def test_paper_policy_augments_every_split(self):
        result = split(_originals(306, size=4), seed=1, augment_policy="paper")
        assert (len(result.train), len(result.val), len(result.test)) == (1472, 488, 488)
        assert result.augmented == {"train": True, "val": True, "test": True}

    @pytest.mark.parametrize("name", ["paper", "PAPER", " all "])
    def test_policy_names(self, name):
        assert AugmentPolicy.parse(name) is AugmentPolicy.PAPER

    def test_default_policy_keeps_test_original(self):
        result = split(_originals(10, size=4), seed=2)
        assert (len(result.train), len(result.val), len(result.test)) == (48, 16, 2)
        assert result.augmented == {"train": True, "val": True, "test": False}

    def test_partition_by_original(self):
        originals = _originals(25, size=4)
        result = split(originals, seed=3, augment_policy="default")
        groups = [{s.original_id for s in part} for part in result.parts().values()]
        assert not (groups[0] & groups[1]) and not (groups[0] & groups[2]) and not (groups[1] & groups[2])
        assert set().union(*groups) == {s.id for s in originals}

    def test_same_seed_same_membership(self):
        originals = _originals(20, size=4)
        assert split(originals, seed=4).membership() == split(originals, seed=4).membership()
        assert split(originals, seed=4).membership() != split(originals, seed=5).membership()

    def test_too_few_samples(self):
        with pytest.raises(ConfigurationError):
            split(_originals(4, size=4))

    def test_bad_ratio(self):
        with pytest.raises(ConfigurationError):
            split(_originals(10, size=4), ratio=(3, 1))

    def test_unknown_policy(self):
        with pytest.raises(ConfigurationError):
            split(_originals(10, size=4), augment_policy="sometimes")


class TestSynthBlobs:
    def test_single_blob(self):
        for sample in synth_blobs((1, 1), image_size=32, n_images=10, seed=0):
            assert ndimage.label(sample.mask, structure=EIGHT)[1] == 1
            assert sample.count == 1

    def test_component_count_matches_record(self):
        samples = synth_blobs((3, 12), image_size=32, n_images=20, seed=1)
        for sample in samples:
            assert ndimage.label(sample.mask, structure=EIGHT)[1] == sample.count
            assert 3 <= sample.count <= 12
            assert not sample.mask[0].any() and not sample.mask[:, 0].any()

    def test_bit_identical_for_same_seed(self):
        a = synth_blobs((3, 6), image_size=32, n_images=4, seed=7)
        b = synth_blobs((3, 6), image_size=32, n_images=4, seed=7)
        for x, y in zip(a, b):
            assert x.image.tobytes() == y.image.tobytes()
            assert x.mask.tobytes() == y.mask.tobytes()

    def test_images_are_grayscale_in_range(self):
        (sample,) = synth_blobs((2, 2), image_size=16, n_images=1, seed=2, radius_range=(1.5, 2.5))
        assert sample.image.shape == (16, 16, 1)
        assert 0.0 <= sample.image.min() and sample.image.max() <= 1.0
        assert sample.image[sample.mask == 1].mean() > sample.image[sample.mask == 0].mean()

    def test_infeasible_packing(self):
        with pytest.raises(GenerationError):
            synth_blobs((40, 40), image_size=32, n_images=1, seed=0)

    def test_bad_count_range(self):
        with pytest.raises(ConfigurationError):
            synth_blobs((5, 2))


def test_stack_batch():
    images, masks = stack_batch(_originals(3, size=4))
    assert images.shape == (3, 1, 4, 4) and images.dtype == np.float32
    assert masks.shape == (3, 4, 4) and masks.dtype == np.uint8
    with pytest.raises(ValidationError):
        stack_batch([])
