"""
Dataset handling
Image/mask loading and saving, resizing, 8x rotation/mirror augmentation,
3:1:1 splitting by original image, and synthetic blob datasets.
"""

import csv
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from config.settings import PIDNetConfig, Settings
from pidcount.errors import ConfigurationError, DatasetLoadError, DimensionError, GenerationError, ValidationError

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".tif", ".tiff", ".bmp", ".jpg", ".jpeg"}
EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)
BACKGROUND_LEVEL = 0.15
BLOB_LEVEL_RANGE = (0.6, 0.9)


@dataclass
class Sample:
    """
    One image with its ground-truth mask

    image is (H, W, channels) float32 in [0, 1]; mask is (H, W) uint8 in {0, 1}.
    original_id names the source image of an augmented variant.
    """

    id: str
    image: np.ndarray
    mask: np.ndarray
    count: Optional[int] = None
    original_id: Optional[str] = None

    def __post_init__(self):
        if self.image.ndim == 2:
            self.image = self.image[:, :, None]
        if self.image.ndim != 3 or self.image.shape[:2] != self.mask.shape:
            raise DimensionError(
                f"sample {self.id}: image {self.image.shape} and mask {self.mask.shape} disagree on H x W"
            )
        if not np.isin(self.mask, (0, 1)).all():
            raise ValidationError(f"sample {self.id}: mask must contain only 0 and 1")
        self.image = np.asarray(self.image, dtype=np.float32)
        self.mask = np.asarray(self.mask, dtype=np.uint8)
        if self.original_id is None:
            self.original_id = self.id

    @property
    def size(self) -> Tuple[int, int]:
        return self.mask.shape


class AugmentPolicy(str, Enum):
    DEFAULT = "default"  # train + val augmented, test kept original
    PAPER = "paper"  # all three splits augmented
    NONE = "none"

    @classmethod
    def parse(cls, value: Union[str, "AugmentPolicy"]) -> "AugmentPolicy":
        if isinstance(value, cls):
            return value
        name = str(value).strip().lower()
        try:
            return cls(POLICY_ALIASES.get(name, name))
        except ValueError:
            raise ConfigurationError(f"Unknown augment policy '{value}'") from None

    def augments(self, split_name: str) -> bool:
        if self is AugmentPolicy.PAPER:
            return True
        if self is AugmentPolicy.DEFAULT:
            return split_name in ("train", "val")
        return False


POLICY_ALIASES = {"all": "paper"}


@dataclass
class DatasetSplit:
    train: List[Sample]
    val: List[Sample]
    test: List[Sample]
    seed: int
    augmented: Dict[str, bool] = field(default_factory=dict)

    def parts(self) -> Dict[str, List[Sample]]:
        return {"train": self.train, "val": self.val, "test": self.test}

    def membership(self) -> List[Tuple[str, str]]:
        """(original id, split name) rows, one per original image"""
        rows = []
        for name, samples in self.parts().items():
            seen = []
            for sample in samples:
                if sample.original_id not in seen:
                    seen.append(sample.original_id)
            rows.extend((original, name) for original in seen)
        return rows


def _read_counts(directory: Path) -> Dict[str, int]:
    counts_path = directory / Settings.COUNTS_FILENAME
    if not counts_path.exists():
        return {}
    with open(counts_path, newline="", encoding="utf-8") as handle:
        return {row["id"]: int(row["true_count"]) for row in csv.DictReader(handle)}


def _scan(folder: Path) -> Dict[str, Path]:
    found = {}
    for path in sorted(folder.iterdir()):
        if not path.is_file():
            continue
        if path.suffix.lower() not in IMAGE_SUFFIXES:
            logger.warning(f"[WARNING] Skipping non-image file {path}")
            continue
        found[path.stem] = path
    return found


def _read_image(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode in ("RGB", "RGBA", "P", "CMYK"):
            array = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
        else:
            array = np.asarray(img.convert("L"), dtype=np.float32)[:, :, None] / 255.0
    return array


def _read_mask(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        gray = np.asarray(img.convert("L"))
    return (gray >= PIDNetConfig.MASK_THRESHOLD).astype(np.uint8)


def load_dataset(directory: Union[str, Path]) -> List[Sample]:
    """
    Load images/<id>.png paired with masks/<id>.png

    Masks are binarized at 50% gray. Non-image files are skipped with a
    warning; a counts.csv next to the folders attaches true counts.

    Raises:
        DatasetLoadError: missing folders, unpaired files or no pairs at all
    """
    directory = Path(directory)
    images_dir, masks_dir = directory / "images", directory / "masks"
    if not images_dir.is_dir() or not masks_dir.is_dir():
        raise DatasetLoadError(f"{directory} must contain images/ and masks/ folders")

    images, masks = _scan(images_dir), _scan(masks_dir)
    orphans = sorted(set(images) ^ set(masks))
    if orphans:
        raise DatasetLoadError(f"Unpaired files in {directory}", orphans=orphans)
    counts = _read_counts(directory)

    samples = []
    for sample_id in sorted(images):
        try:
            image = _read_image(images[sample_id])
            mask = _read_mask(masks[sample_id])
        except UnidentifiedImageError:
            logger.warning(f"[WARNING] Skipping unreadable image pair '{sample_id}'")
            continue
        samples.append(Sample(id=sample_id, image=image, mask=mask, count=counts.get(sample_id)))

    if not samples:
        raise DatasetLoadError(f"No image/mask pairs found in {directory}")
    logger.info(f"[OK] Loaded {len(samples)} samples from {directory}")
    return samples


def load_images(directory: Union[str, Path]) -> List[Sample]:
    """
    Images to count, with or without masks

    A full dataset directory loads as load_dataset does; otherwise images are
    read from images/ (or the directory itself) with empty placeholder masks.
    """
    directory = Path(directory)
    if (directory / "images").is_dir() and (directory / "masks").is_dir():
        return load_dataset(directory)
    folder = directory / "images" if (directory / "images").is_dir() else directory
    if not folder.is_dir():
        raise DatasetLoadError(f"Image directory not found: {folder}")
    samples = []
    for sample_id, path in _scan(folder).items():
        try:
            image = _read_image(path)
        except UnidentifiedImageError:
            logger.warning(f"[WARNING] Skipping unreadable image '{sample_id}'")
            continue
        samples.append(Sample(id=sample_id, image=image, mask=np.zeros(image.shape[:2], dtype=np.uint8)))
    if not samples:
        raise DatasetLoadError(f"No images found in {folder}")
    logger.info(f"[OK] Loaded {len(samples)} images from {folder}")
    return samples


def _to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_dataset(samples: Sequence[Sample], directory: Union[str, Path]) -> Path:
    """Write samples in the images/ + masks/ layout, plus counts.csv when counts are known"""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "masks").mkdir(parents=True, exist_ok=True)

    for sample in samples:
        pixels = _to_uint8(sample.image)
        if pixels.shape[2] == 1:
            Image.fromarray(pixels[:, :, 0], mode="L").save(directory / "images" / f"{sample.id}.png")
        else:
            Image.fromarray(pixels, mode="RGB").save(directory / "images" / f"{sample.id}.png")
        Image.fromarray((sample.mask * 255).astype(np.uint8), mode="L").save(directory / "masks" / f"{sample.id}.png")

    counted = [s for s in samples if s.count is not None]
    if counted:
        with open(directory / Settings.COUNTS_FILENAME, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["id", "true_count"])
            for sample in counted:
                writer.writerow([sample.id, sample.count])
    logger.info(f"[OK] Wrote {len(samples)} samples to {directory}")
    return directory


def _check_size(size: int):
    if size < PIDNetConfig.SIZE_MULTIPLE or size % PIDNetConfig.SIZE_MULTIPLE:
        raise ConfigurationError(
            f"image size must be >= {PIDNetConfig.SIZE_MULTIPLE} and divisible by {PIDNetConfig.SIZE_MULTIPLE}, got {size}"
        )


def resize(sample: Sample, size: int) -> Sample:
    """Bilinear resize of the image, nearest-neighbour resize of the mask, to size x size"""
    _check_size(size)
    if sample.size == (size, size):
        return sample
    channels = [
        np.asarray(Image.fromarray(sample.image[:, :, c].astype(np.float32), mode="F")
                   .resize((size, size), Image.Resampling.BILINEAR))
        for c in range(sample.image.shape[2])
    ]
    image = np.clip(np.stack(channels, axis=2), 0.0, 1.0).astype(np.float32)
    mask = np.asarray(Image.fromarray((sample.mask * 255).astype(np.uint8), mode="L").resize((size, size), Image.Resampling.NEAREST))
    return replace(sample, image=image, mask=(mask >= PIDNetConfig.MASK_THRESHOLD).astype(np.uint8))


def augment8(sample: Sample) -> List[Sample]:
    """
    The 8 isometries of the square: rotations by 0/90/180/270 degrees
    (counter-clockwise), each with and without a horizontal mirror

    Ids get a "_rot<deg>" or "_rot<deg>_mirror" suffix.
    """
    height, width = sample.size
    if height != width:
        raise ConfigurationError(f"augment8 needs a square sample, {sample.id} is {height} x {width}")
    variants = []
    for quarter in range(4):
        image = np.rot90(sample.image, quarter, axes=(0, 1))
        mask = np.rot90(sample.mask, quarter, axes=(0, 1))
        suffix = f"_rot{90 * quarter}"
        for mirrored in (False, True):
            img, msk, name = image, mask, suffix
            if mirrored:
                img, msk, name = image[:, ::-1], mask[:, ::-1], suffix + "_mirror"
            variants.append(Sample(
                id=sample.id + name,
                image=np.ascontiguousarray(img),
                mask=np.ascontiguousarray(msk),
                count=sample.count,
                original_id=sample.original_id,
            ))
    return variants


def augment_dataset(samples: Sequence[Sample]) -> List[Sample]:
    return [variant for sample in samples for variant in augment8(sample)]


def _split_sizes(n: int, ratio: Sequence[int]) -> List[int]:
    """Largest-remainder apportionment of n items; earlier parts win equal remainders"""
    total = sum(ratio)
    quotas = [Fraction(n * r, total) for r in ratio]
    sizes = [int(q) for q in quotas]
    leftover = n - sum(sizes)
    order = sorted(range(len(ratio)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[:leftover]:
        sizes[i] += 1
    return sizes


def split(samples: Sequence[Sample], ratio: Sequence[int] = PIDNetConfig.SPLIT_RATIO, seed: int = PIDNetConfig.SEED,
          augment_policy: Union[str, AugmentPolicy] = PIDNetConfig.AUGMENT_POLICY) -> DatasetSplit:
    """
    Partition original samples into train / val / test, then augment per policy

    Raises:
        ConfigurationError: fewer than 5 samples, bad ratio, or an empty split
    """
    policy = AugmentPolicy.parse(augment_policy)
    ratio = tuple(int(r) for r in ratio)
    if len(ratio) != 3 or any(r < 0 for r in ratio) or sum(ratio) == 0:
        raise ConfigurationError(f"split ratio must be three non-negative integers, got {ratio}")
    if len(samples) < 5:
        raise ConfigurationError(f"split needs at least 5 samples, got {len(samples)}")
    ids = [s.id for s in samples]
    if len(set(ids)) != len(ids):
        raise ConfigurationError("split expects original samples with unique ids")

    sizes = _split_sizes(len(samples), ratio)
    for name, size, r in zip(("train", "val", "test"), sizes, ratio):
        if r and not size:
            raise ConfigurationError(f"{len(samples)} samples leave the {name} split empty")

    order = np.random.default_rng(seed).permutation(len(samples))
    bounds = np.cumsum([0] + sizes)
    parts = {}
    augmented = {}
    for index, name in enumerate(("train", "val", "test")):
        chosen = sorted(order[bounds[index]:bounds[index + 1]].tolist())
        originals = [samples[i] for i in chosen]
        augmented[name] = policy.augments(name)
        parts[name] = augment_dataset(originals) if augmented[name] else originals

    logger.info(
        f"[INFO] Split {len(samples)} originals into {sizes[0]}/{sizes[1]}/{sizes[2]} "
        f"(policy {policy.value}: {len(parts['train'])}/{len(parts['val'])}/{len(parts['test'])} samples)"
    )
    return DatasetSplit(train=parts["train"], val=parts["val"], test=parts["test"], seed=seed, augmented=augmented)


def _ellipse(a: float, b: float, theta: float, cy: float, cx: float, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _place_blob(rng: np.random.Generator, occupied: np.ndarray, radius_range: Tuple[float, float],
                attempts: int) -> Optional[np.ndarray]:
    size = occupied.shape[0]
    forbidden = ndimage.binary_dilation(occupied, structure=EIGHT_CONNECTED)
    r_min, r_max = radius_range
    for _ in range(attempts):
        a = rng.uniform(r_min, r_max)
        b = rng.uniform(max(r_min, 0.6 * a), a) if a > r_min else a
        theta = rng.uniform(0.0, np.pi)
        reach = int(np.ceil(a)) + 1
        if size - 1 - reach <= reach:
            continue
        # centres are drawn among free pixels inside the margin
        window = ~forbidden[reach:size - reach, reach:size - reach]
        free = np.argwhere(window)
        if not len(free):
            return None
        cy, cx = free[rng.integers(len(free))] + reach + rng.uniform(-0.5, 0.5, size=2)
        blob = ndimage.binary_opening(_ellipse(a, b, theta, cy, cx, size), structure=EIGHT_CONNECTED)
        if not blob.any():
            continue
        if blob[0].any() or blob[-1].any() or blob[:, 0].any() or blob[:, -1].any():
            continue
        if (blob & forbidden).any():
            continue
        if ndimage.label(blob, structure=EIGHT_CONNECTED)[1] != 1:
            continue
        return blob
    return None


def synth_blobs(count_range: Tuple[int, int] = PIDNetConfig.SYNTH_COUNT_RANGE,
                image_size: int = PIDNetConfig.SYNTH_IMAGE_SIZE,
                n_images: int = 64, seed: int = PIDNetConfig.SEED,
                noise_sigma: float = PIDNetConfig.SYNTH_NOISE_SIGMA,
                radius_range: Optional[Tuple[float, float]] = None,
                attempts: int = PIDNetConfig.SYNTH_PLACEMENT_ATTEMPTS) -> List[Sample]:
    """
    Grayscale images of bright elliptical blobs on a dark noisy background

    Every blob is invariant under 3 x 3 opening and separated from the other
    blobs and the border by at least one background pixel, so the mask's
    8-connected component count equals the recorded count, also after
    morphological filtering.

    Args:
        count_range: (min, max) blobs per image, inclusive
        image_size: Side length, a multiple of 16
        n_images: Number of samples
        seed: Generator seed; identical arguments give identical samples
        noise_sigma: Standard deviation of the additive Gaussian noise
        radius_range: (min, max) semi-major axis; defaults to (2, max(3, size / 12))

    Raises:
        GenerationError: a blob could not be placed within the attempt budget
    """
    low, high = (int(c) for c in count_range)
    if low < 1 or high < low:
        raise ConfigurationError(f"count range must satisfy 1 <= min <= max, got {count_range}")
    _check_size(image_size)
    if n_images < 1:
        raise ConfigurationError(f"n_images must be >= 1, got {n_images}")
    if noise_sigma < 0:
        raise ConfigurationError(f"noise_sigma must be >= 0, got {noise_sigma}")
    if radius_range is None:
        radius_range = (2.0, max(3.0, image_size / 12.0))
    r_min, r_max = float(radius_range[0]), float(radius_range[1])
    if r_min < 1.5 or r_max < r_min:
        raise ConfigurationError(f"radius range must satisfy 1.5 <= min <= max, got {radius_range}")
    footprint = (2 * r_min + 2) ** 2
    if high * footprint > image_size ** 2:
        raise GenerationError(f"{high} blobs of radius >= {r_min} cannot fit a {image_size} x {image_size} image")

    rng = np.random.default_rng(seed)
    samples = []
    for index in range(n_images):
        count = int(rng.integers(low, high + 1))
        mask = np.zeros((image_size, image_size), dtype=bool)
        image = np.full((image_size, image_size), BACKGROUND_LEVEL, dtype=np.float64)
        for blob_index in range(count):
            blob = _place_blob(rng, mask, (r_min, r_max), attempts)
            if blob is None:
                raise GenerationError(
                    f"could not place blob {blob_index + 1} of {count} in image {index} after {attempts} attempts"
                )
            mask |= blob
            image[blob] = rng.uniform(*BLOB_LEVEL_RANGE)
        if noise_sigma:
            image = image + rng.normal(0.0, noise_sigma, size=image.shape)
        image = np.clip(image, 0.0, 1.0).astype(np.float32)
        samples.append(Sample(id=f"synth_{index:04d}", image=image, mask=mask.astype(np.uint8), count=count))

    logger.info(f"[OK] Generated {n_images} synthetic {image_size} x {image_size} images (seed {seed})")
    return samples


def stack_batch(samples: Sequence[Sample]) -> Tuple[np.ndarray, np.ndarray]:
    """(N, C, H, W) float32 images and (N, H, W) uint8 masks"""
    if not samples:
        raise ValidationError("cannot stack an empty batch")
    shape = samples[0].image.shape
    for sample in samples[1:]:
        if sample.image.shape != shape:
            raise DimensionError(f"batch mixes image shapes {shape} and {sample.image.shape} ({sample.id})")
    images = np.stack([s.image.transpose(2, 0, 1) for s in samples]).astype(np.float32)
    masks = np.stack([s.mask for s in samples]).astype(np.uint8)
    return images, masks
