"""
Counting post-processing
Probability map -> binary mask -> morphological debris removal ->
8-neighbourhood connected components. The component count is the object count.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
from PIL import Image
from scipy import ndimage

from config.settings import PIDNetConfig
from pidcount.errors import ConfigurationError, DimensionError, ValidationError
from pidcount.tensor_core import Tensor

logger = logging.getLogger(__name__)

OPENING_STRUCTURE = np.ones((3, 3), dtype=bool)


@dataclass
class LabelMap:
    """Component labels (0 = background, 1..count) and the component count"""

    labels: np.ndarray
    count: int

    def areas(self) -> np.ndarray:
        """Pixel area of components 1..count (index 0 is component 1)"""
        return np.bincount(self.labels.ravel(), minlength=self.count + 1)[1:]


@dataclass(frozen=True)
class PostprocParams:
    prob_threshold: float = PIDNetConfig.PROB_THRESHOLD
    min_area: int = PIDNetConfig.MIN_AREA_AT_256
    opening: bool = PIDNetConfig.OPENING

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 0.0 < self.prob_threshold < 1.0:
            raise ConfigurationError(f"prob_threshold must lie in (0, 1), got {self.prob_threshold}")
        if self.min_area < 0:
            raise ConfigurationError(f"min_area must be >= 0, got {self.min_area}")

    @classmethod
    def for_size(cls, size: int, prob_threshold: float = PIDNetConfig.PROB_THRESHOLD,
                 opening: bool = PIDNetConfig.OPENING) -> "PostprocParams":
        """Scale the 256 x 256 minimum area to another image size"""
        min_area = int(round(PIDNetConfig.MIN_AREA_AT_256 * (size / 256.0) ** 2))
        return cls(prob_threshold=prob_threshold, min_area=min_area, opening=opening)


class UnionFind:
    """Equivalence table of provisional labels; the smaller label is always the root"""

    def __init__(self):
        self.parent: List[int] = [0]

    def make(self) -> int:
        label = len(self.parent)
        self.parent.append(label)
        return label

    def find(self, label: int) -> int:
        parent = self.parent
        while parent[label] != label:
            parent[label] = parent[parent[label]]
            label = parent[label]
        return label

    def union(self, a: int, b: int) -> int:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return ra
        if ra < rb:
            self.parent[rb] = ra
            return ra
        self.parent[ra] = rb
        return rb


def _as_probabilities(probs: Union[Tensor, np.ndarray]) -> np.ndarray:
    return probs.data if isinstance(probs, Tensor) else np.asarray(probs)


def binarize(probs: Union[Tensor, np.ndarray], threshold: float = PIDNetConfig.PROB_THRESHOLD) -> np.ndarray:
    """
    Foreground mask from softmax probabilities

    A pixel is foreground iff its foreground-channel probability is strictly
    greater than `threshold`; at 0.5 this is the per-pixel argmax with
    background winning exact ties.

    Args:
        probs: (N, 2, H, W) or (2, H, W)
        threshold: Cut-off in (0, 1)

    Returns:
        uint8 mask (N, H, W) or (H, W)
    """
    array = _as_probabilities(probs)
    if array.ndim not in (3, 4) or array.shape[-3] != 2:
        raise DimensionError(f"binarize expects (N, 2, H, W) or (2, H, W) probabilities, got {array.shape}")
    foreground = array[..., PIDNetConfig.FOREGROUND_CHANNEL, :, :]
    return (foreground > threshold).astype(np.uint8)


def _check_mask(mask: np.ndarray, op: str) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise DimensionError(f"{op} expects a 2-D mask, got shape {mask.shape}")
    return mask.astype(bool)


def label_components_8(mask: np.ndarray) -> LabelMap:
    """
    Two-pass 8-connectivity labeling

    The first row-major pass assigns provisional labels from the already
    visited neighbours (W, NW, N, NE) and records equivalences; the second
    pass resolves every provisional label to its root and renumbers roots
    1..K in order of first appearance.
    """
    mask = _check_mask(mask, "label_components_8")
    height, width = mask.shape
    provisional = np.zeros((height, width), dtype=np.int64)
    equivalences = UnionFind()

    rows = mask.tolist()
    labels = provisional.tolist()
    for y in range(height):
        row = rows[y]
        current = labels[y]
        above = labels[y - 1] if y > 0 else None
        for x in range(width):
            if not row[x]:
                continue
            neighbours = []
            if x > 0 and current[x - 1]:
                neighbours.append(current[x - 1])
            if above is not None:
                for nx in (x - 1, x, x + 1):
                    if 0 <= nx < width and above[nx]:
                        neighbours.append(above[nx])
            if not neighbours:
                current[x] = equivalences.make()
                continue
            label = min(neighbours)
            for other in neighbours:
                if other != label:
                    equivalences.union(label, other)
            current[x] = label

    provisional = np.asarray(labels, dtype=np.int64).reshape(height, width)
    n_provisional = len(equivalences.parent) - 1
    if n_provisional == 0:
        return LabelMap(labels=np.zeros((height, width), dtype=np.int32), count=0)

    roots = np.array([equivalences.find(label) for label in range(n_provisional + 1)], dtype=np.int64)
    unique_roots, consecutive = np.unique(roots[1:], return_inverse=True)
    lookup = np.zeros(n_provisional + 1, dtype=np.int32)
    lookup[1:] = consecutive + 1
    return LabelMap(labels=lookup[provisional], count=int(unique_roots.size))


def morph_filter(mask: np.ndarray, params: PostprocParams = PostprocParams()) -> np.ndarray:
    """
    Remove debris: optional 3 x 3 opening, then drop components smaller than min_area

    Returns:
        uint8 mask
    """
    filtered = _check_mask(mask, "morph_filter")
    if params.opening:
        filtered = ndimage.binary_opening(filtered, structure=OPENING_STRUCTURE)
    if params.min_area > 0 and filtered.any():
        components = label_components_8(filtered)
        keep = np.zeros(components.count + 1, dtype=bool)
        keep[1:] = components.areas() >= params.min_area
        filtered = keep[components.labels]
    return filtered.astype(np.uint8)


def count_mask(mask: np.ndarray, params: PostprocParams = PostprocParams()) -> Tuple[int, LabelMap, np.ndarray]:
    """morph_filter followed by label_components_8, shared by the network and the classical baselines"""
    filtered = morph_filter(mask, params)
    components = label_components_8(filtered)
    return components.count, components, filtered


def count_objects(probs: Union[Tensor, np.ndarray],
                  params: PostprocParams = PostprocParams()) -> Tuple[int, LabelMap, np.ndarray]:
    """
    Count objects in one image's probability map

    Args:
        probs: (2, H, W) or (1, 2, H, W)
        params: Threshold and debris removal settings

    Returns:
        (count, LabelMap, filtered mask)
    """
    array = _as_probabilities(probs)
    if array.ndim == 4:
        if array.shape[0] != 1:
            raise DimensionError(f"count_objects works on one image at a time, got batch of {array.shape[0]}")
        array = array[0]
    return count_mask(binarize(array, params.prob_threshold), params)


def save_label_map(labels: Union[LabelMap, np.ndarray], path: Union[str, Path]) -> Path:
    """Write labels as a 16-bit grayscale PNG"""
    array = labels.labels if isinstance(labels, LabelMap) else np.asarray(labels)
    if array.size and array.max() > np.iinfo(np.uint16).max:
        raise ValidationError(f"{array.max()} components do not fit a 16-bit label image")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array.astype(np.uint16)).save(path)
    return path
