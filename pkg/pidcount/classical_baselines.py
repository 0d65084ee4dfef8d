"""
Classical counting baselines
Otsu thresholding, marker-controlled watershed and Hough circle detection,
each ending in the shared morphological filter / component counting tail.
"""

import logging
from dataclasses import dataclass, field
from typing import List, NamedTuple, Sequence, Tuple

import numpy as np
from scipy import ndimage
from skimage import color, draw, feature, filters, segmentation, transform

from config.settings import PIDNetConfig
from pidcount.errors import ConfigurationError, DegenerateInputError, DimensionError
from pidcount.postproc_counting import LabelMap, PostprocParams, count_mask, label_components_8, morph_filter

logger = logging.getLogger(__name__)

METHODS = ("otsu", "watershed", "hough")
EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)
FLAT_EDGE_EPS = 1e-12


@dataclass(frozen=True)
class BaselineParams:
    hough_radius_range: Tuple[int, int, int] = PIDNetConfig.HOUGH_RADIUS_RANGE
    hough_threshold: float = PIDNetConfig.HOUGH_THRESHOLD
    hough_nms_radius: int = PIDNetConfig.HOUGH_NMS_RADIUS
    edge_threshold: float = PIDNetConfig.EDGE_THRESHOLD
    watershed_sigma: float = PIDNetConfig.WATERSHED_SIGMA
    watershed_min_distance: int = PIDNetConfig.WATERSHED_MIN_DISTANCE
    foreground_bright: bool = PIDNetConfig.FOREGROUND_BRIGHT
    postproc: PostprocParams = field(default_factory=PostprocParams)

    def __post_init__(self):
        object.__setattr__(self, "hough_radius_range", tuple(int(v) for v in self.hough_radius_range))
        self.validate()

    def validate(self):
        if len(self.hough_radius_range) != 3:
            raise ConfigurationError(f"hough radius range is (r_min, r_max, step), got {self.hough_radius_range}")
        r_min, r_max, step = self.hough_radius_range
        if r_min < 1 or r_max <= r_min or step < 1:
            raise ConfigurationError(f"hough radius range needs 1 <= r_min < r_max and step >= 1, got {self.hough_radius_range}")
        if not 0.0 < self.hough_threshold <= 1.0:
            raise ConfigurationError(f"hough_threshold must lie in (0, 1], got {self.hough_threshold}")
        if self.hough_nms_radius < 0:
            raise ConfigurationError(f"hough_nms_radius must be >= 0, got {self.hough_nms_radius}")
        if not 0.0 <= self.edge_threshold < 1.0:
            raise ConfigurationError(f"edge_threshold must lie in [0, 1), got {self.edge_threshold}")
        if self.watershed_sigma < 0:
            raise ConfigurationError(f"watershed_sigma must be >= 0, got {self.watershed_sigma}")
        if self.watershed_min_distance < 1:
            raise ConfigurationError(f"watershed_min_distance must be >= 1, got {self.watershed_min_distance}")

    @property
    def radii(self) -> np.ndarray:
        r_min, r_max, step = self.hough_radius_range
        return np.arange(r_min, r_max + 1, step, dtype=np.intp)


class Circle(NamedTuple):
    cy: int
    cx: int
    radius: int
    score: float


class BaselineResult(NamedTuple):
    count: int
    mask: np.ndarray
    labels: LabelMap


def to_gray(image: np.ndarray) -> np.ndarray:
    """(H, W), (H, W, 1) or (H, W, 3) in [0, 1] -> (H, W) float64"""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3 and image.shape[2] == 1:
        image = image[:, :, 0]
    elif image.ndim == 3 and image.shape[2] == 3:
        image = color.rgb2gray(image)
    if image.ndim != 2:
        raise DimensionError(f"expected a grayscale or RGB image, got shape {image.shape}")
    return image


def quantize(gray: np.ndarray) -> np.ndarray:
    """256-bin intensity index of every pixel"""
    return np.clip(np.round(to_gray(gray) * 255.0), 0, 255).astype(np.intp)


def otsu_threshold_bin(histogram: Sequence[int]) -> int:
    """
    Otsu's threshold over a 256-bin histogram, in exact integer arithmetic

    Class 0 holds bins <= t. Between-class variance is proportional to
    (m0 * N - M * w0)^2 / (w0 * w1); the lowest t reaching the maximum wins.

    Raises:
        DegenerateInputError: fewer than two occupied bins
    """
    hist = [int(h) for h in histogram]
    if len(hist) != 256:
        raise DimensionError(f"histogram must have 256 bins, got {len(hist)}")
    total = sum(hist)
    moment = sum(i * h for i, h in enumerate(hist))

    best_t, best_num, best_den = None, 0, 1
    w0 = m0 = 0
    for t in range(255):
        w0 += hist[t]
        m0 += t * hist[t]
        w1 = total - w0
        if w0 == 0 or w1 == 0:
            continue
        num = (m0 * total - moment * w0) ** 2
        den = w0 * w1
        if best_t is None or num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    if best_t is None:
        raise DegenerateInputError("Otsu threshold needs at least two distinct intensity levels")
    return best_t


def otsu_threshold(gray: np.ndarray) -> float:
    """Threshold in [0, 1]: the midpoint between Otsu's bin and the next one"""
    histogram = np.bincount(quantize(gray).ravel(), minlength=256)
    return (otsu_threshold_bin(histogram) + 0.5) / 255.0


def otsu_mask(gray: np.ndarray, foreground_bright: bool = True) -> np.ndarray:
    """Binary foreground from Otsu's threshold, decided per intensity bin"""
    bins = quantize(gray)
    t = otsu_threshold_bin(np.bincount(bins.ravel(), minlength=256))
    return (bins > t) if foreground_bright else (bins <= t)


def otsu_count(gray: np.ndarray, params: BaselineParams = BaselineParams()) -> Tuple[int, LabelMap, np.ndarray]:
    """Otsu foreground, then the shared filter and 8-connected counting; constant image counts 0"""
    try:
        mask = otsu_mask(gray, params.foreground_bright)
    except DegenerateInputError:
        logger.warning("[WARNING] Constant image, Otsu finds no foreground")
        mask = np.zeros(to_gray(gray).shape, dtype=bool)
    return count_mask(mask, params.postproc)


def watershed_count(gray: np.ndarray, params: BaselineParams = BaselineParams()) -> Tuple[int, LabelMap]:
    """
    Marker-controlled watershed on the distance transform

    Smoothed image -> Otsu foreground -> debris filter -> Euclidean distance
    transform -> local maxima (min-distance suppression, adjacent maxima
    merged) as markers -> flooding of the negated distance inside the
    foreground. Each marker seeds one region.
    """
    image = to_gray(gray)
    if params.watershed_sigma > 0:
        image = ndimage.gaussian_filter(image, sigma=params.watershed_sigma)
    try:
        foreground = otsu_mask(image, params.foreground_bright)
    except DegenerateInputError:
        return 0, LabelMap(labels=np.zeros(image.shape, dtype=np.int32), count=0)
    foreground = morph_filter(foreground, params.postproc).astype(bool)
    if not foreground.any():
        return 0, LabelMap(labels=np.zeros(image.shape, dtype=np.int32), count=0)

    distance = ndimage.distance_transform_edt(foreground)
    coords = feature.peak_local_max(
        distance,
        min_distance=params.watershed_min_distance,
        labels=foreground.astype(np.int32),
        exclude_border=False,
    )
    peaks = np.zeros(image.shape, dtype=bool)
    if len(coords):
        peaks[tuple(coords.T)] = True
    markers, n_markers = ndimage.label(peaks, structure=EIGHT_CONNECTED)
    if n_markers == 0:
        return 0, LabelMap(labels=np.zeros(image.shape, dtype=np.int32), count=0)

    regions = segmentation.watershed(-distance, markers, mask=foreground)
    present = np.unique(regions[regions > 0])
    lookup = np.zeros(int(regions.max()) + 1, dtype=np.int32)
    lookup[present] = np.arange(1, present.size + 1, dtype=np.int32)
    return int(present.size), LabelMap(labels=lookup[regions], count=int(present.size))


def _suppress(candidates: List[Circle], radius: float) -> List[Circle]:
    """Greedy non-maximum suppression: keep the best-scoring circle, drop others whose centre is within radius"""
    ordered = sorted(candidates, key=lambda c: (-c.score, c.radius, c.cy, c.cx))
    kept: List[Circle] = []
    for circle in ordered:
        if all(np.hypot(circle.cy - k.cy, circle.cx - k.cx) > radius for k in kept):
            kept.append(circle)
    return kept


def sobel_edges(gray: np.ndarray, edge_threshold: float = PIDNetConfig.EDGE_THRESHOLD) -> np.ndarray:
    """Sobel magnitude thresholded at a fraction of its maximum; flat image gives no edges"""
    gray = to_gray(gray)
    if np.ptp(gray) == 0:
        return np.zeros(gray.shape, dtype=bool)
    magnitude = filters.sobel(gray)
    peak = magnitude.max()
    # sobel leaves rounding residue of order 1e-17 on flat regions
    if peak <= FLAT_EDGE_EPS:
        return np.zeros(magnitude.shape, dtype=bool)
    return magnitude >= edge_threshold * peak


def hough_circle_count(gray: np.ndarray, params: BaselineParams = BaselineParams()) -> Tuple[int, List[Circle]]:
    """
    Circle detection by voting in (centre, radius) space

    The accumulator is normalized by circumference, so a score is the
    fraction of a circle's perimeter lying on edge pixels.

    Returns:
        (number of detections, detections sorted by descending score)
    """
    edges = sobel_edges(gray, params.edge_threshold)
    if not edges.any():
        return 0, []
    radii = params.radii
    accumulator = transform.hough_circle(edges, radii, normalize=True)
    distance = max(1, params.hough_nms_radius)
    scores, cxs, cys, found_radii = transform.hough_circle_peaks(
        accumulator, radii, min_xdistance=distance, min_ydistance=distance, threshold=params.hough_threshold,
    )
    candidates = [
        Circle(cy=int(cy), cx=int(cx), radius=int(r), score=float(s))
        for s, cx, cy, r in zip(scores, cxs, cys, found_radii)
    ]
    detections = _suppress(candidates, params.hough_nms_radius)
    return len(detections), detections


def circles_to_mask(circles: Sequence[Circle], shape: Tuple[int, int]) -> np.ndarray:
    mask = np.zeros(shape, dtype=np.uint8)
    for circle in circles:
        rr, cc = draw.disk((circle.cy, circle.cx), circle.radius, shape=shape)
        mask[rr, cc] = 1
    return mask


def run_baseline(method: str, gray: np.ndarray, params: BaselineParams = BaselineParams()) -> BaselineResult:
    """Run one baseline and return its count, predicted mask and label map"""
    method = method.lower()
    if method == "otsu":
        count, labels, mask = otsu_count(gray, params)
        return BaselineResult(count, mask.astype(np.uint8), labels)
    if method == "watershed":
        count, labels = watershed_count(gray, params)
        return BaselineResult(count, (labels.labels > 0).astype(np.uint8), labels)
    if method == "hough":
        count, circles = hough_circle_count(gray, params)
        mask = circles_to_mask(circles, to_gray(gray).shape)
        return BaselineResult(count, mask, label_components_8(mask))
    raise ConfigurationError(f"Unknown baseline '{method}' (choose from {', '.join(METHODS)})")
