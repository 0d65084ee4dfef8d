"""
Evaluation metrics
Accuracy, Dice, Jaccard, precision, counting accuracy and Hausdorff distance
for predicted vs ground-truth masks, per image and aggregated.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from pidcount.errors import DimensionError, UndefinedMetricError, ValidationError
from pidcount.postproc_counting import label_components_8

logger = logging.getLogger(__name__)

METRIC_FIELDS = ("accuracy", "dice", "jaccard", "precision", "counting_accuracy", "hausdorff_px")


@dataclass(frozen=True)
class Confusion:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def _pair(pred: np.ndarray, gt: np.ndarray, op: str) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"{op}: prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    return pred.astype(bool), gt.astype(bool)


def confusion(pred: np.ndarray, gt: np.ndarray) -> Confusion:
    """Pixel-wise TP / TN / FP / FN counts"""
    pred, gt = _pair(pred, gt, "confusion")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return Confusion(tp=tp, tn=int(pred.size) - tp - fp - fn, fp=fp, fn=fn)


def segmentation_metrics(counts: Optional[Confusion] = None, pred: Optional[np.ndarray] = None,
                         gt: Optional[np.ndarray] = None) -> Tuple[float, float, float, float]:
    """
    Accuracy, Dice, Jaccard and precision

    Two empty masks score Dice = Jaccard = 1. Precision with no predicted
    positives is 1 when the ground truth is empty too, otherwise 0.

    Args:
        counts: Confusion counts; computed from pred/gt when omitted
        pred: Binary prediction
        gt: Binary ground truth

    Returns:
        (accuracy, dice, jaccard, precision)
    """
    if counts is None:
        if pred is None or gt is None:
            raise ValidationError("segmentation_metrics needs a Confusion or both masks")
        counts = confusion(pred, gt)
    if counts.total == 0:
        raise ValidationError("segmentation_metrics on an empty image")

    accuracy = (counts.tp + counts.tn) / counts.total
    overlap_denominator = 2 * counts.tp + counts.fp + counts.fn
    dice = 2 * counts.tp / overlap_denominator if overlap_denominator else 1.0
    union = counts.tp + counts.fp + counts.fn
    jaccard = counts.tp / union if union else 1.0
    predicted = counts.tp + counts.fp
    if predicted:
        precision = counts.tp / predicted
    else:
        precision = 1.0 if counts.tp + counts.fn == 0 else 0.0
    return accuracy, dice, jaccard, precision


def counting_accuracy(n_pred: int, n_gt: int) -> float:
    """
    1 - |n_pred - n_gt| / n_gt, not clamped (gross over-counting goes negative)

    Raises:
        UndefinedMetricError: n_gt < 1
    """
    if n_gt < 1:
        raise UndefinedMetricError(f"counting accuracy is undefined for {n_gt} ground-truth objects")
    # written as a single division so (97, 100) is exactly 0.97
    return (n_gt - abs(n_pred - n_gt)) / n_gt


def _directed_sq(source: np.ndarray, target: np.ndarray) -> int:
    """Largest squared distance from a source pixel to its nearest target pixel"""
    _, (near_y, near_x) = ndimage.distance_transform_edt(~target, return_indices=True)
    ys, xs = np.nonzero(source)
    dy = near_y[ys, xs] - ys
    dx = near_x[ys, xs] - xs
    return int((dy * dy + dx * dx).max())


def hausdorff_with_flag(pred: np.ndarray, gt: np.ndarray) -> Tuple[float, bool]:
    """
    Symmetric Hausdorff distance in pixels plus a one-sided-empty flag

    Both empty gives (0, False). Exactly one empty gives the image diagonal
    sqrt(H^2 + W^2) and flag True.
    """
    pred, gt = _pair(pred, gt, "hausdorff")
    has_pred, has_gt = pred.any(), gt.any()
    if not has_pred and not has_gt:
        return 0.0, False
    if has_pred != has_gt:
        return float(math.hypot(*pred.shape)), True
    squared = max(_directed_sq(pred, gt), _directed_sq(gt, pred))
    return math.sqrt(squared), False


def hausdorff(pred: np.ndarray, gt: np.ndarray) -> float:
    return hausdorff_with_flag(pred, gt)[0]


def gt_count(mask: np.ndarray) -> int:
    """Number of 8-connected foreground components"""
    return label_components_8(mask).count


@dataclass
class ImageMetrics:
    id: str
    method: str
    accuracy: float
    dice: float
    jaccard: float
    precision: float
    counting_accuracy: Optional[float]
    hausdorff_px: float
    hausdorff_flagged: bool
    n_pred: int
    n_gt: int

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def evaluate_image(sample_id: str, pred: np.ndarray, gt: np.ndarray, n_pred: int,
                   n_gt: Optional[int] = None, method: str = "pidnet") -> ImageMetrics:
    """All six metrics for one image; n_gt defaults to the component count of gt"""
    counts = confusion(pred, gt)
    accuracy, dice, jaccard, precision = segmentation_metrics(counts)
    if n_gt is None:
        n_gt = gt_count(gt)
    try:
        count_acc: Optional[float] = counting_accuracy(n_pred, n_gt)
    except UndefinedMetricError:
        logger.warning(f"[WARNING] {sample_id}: no ground-truth objects, counting accuracy excluded")
        count_acc = None
    distance, flagged = hausdorff_with_flag(pred, gt)
    if flagged:
        logger.warning(f"[WARNING] {sample_id}: one mask is empty, Hausdorff set to the image diagonal")
    return ImageMetrics(
        id=sample_id, method=method, accuracy=accuracy, dice=dice, jaccard=jaccard,
        precision=precision, counting_accuracy=count_acc, hausdorff_px=distance,
        hausdorff_flagged=flagged, n_pred=int(n_pred), n_gt=int(n_gt),
    )


@dataclass
class MetricsReport:
    method: str
    accuracy: float
    dice: float
    jaccard: float
    precision: float
    counting_accuracy: Optional[float]
    hausdorff_px: float
    n_images: int
    n_counting_excluded: int = 0
    n_hausdorff_flagged: int = 0
    rows: List[ImageMetrics] = field(default_factory=list)

    def aggregate(self) -> Dict[str, Any]:
        """Aggregate fields only (the JSON payload)"""
        data = {name: getattr(self, name) for name in METRIC_FIELDS}
        data.update(
            method=self.method,
            n_images=self.n_images,
            n_counting_excluded=self.n_counting_excluded,
            n_hausdorff_flagged=self.n_hausdorff_flagged,
        )
        return data


def build_report(rows: Sequence[ImageMetrics], method: Optional[str] = None) -> MetricsReport:
    """
    Unweighted means over images

    Counting accuracy averages only the rows where it is defined; it is None
    when no row defines it.
    """
    if not rows:
        raise ValidationError("cannot build a metrics report from zero images")
    defined = [r.counting_accuracy for r in rows if r.counting_accuracy is not None]
    return MetricsReport(
        method=method or rows[0].method,
        accuracy=float(np.mean([r.accuracy for r in rows])),
        dice=float(np.mean([r.dice for r in rows])),
        jaccard=float(np.mean([r.jaccard for r in rows])),
        precision=float(np.mean([r.precision for r in rows])),
        counting_accuracy=float(np.mean(defined)) if defined else None,
        hausdorff_px=float(np.mean([r.hausdorff_px for r in rows])),
        n_images=len(rows),
        n_counting_excluded=len(rows) - len(defined),
        n_hausdorff_flagged=sum(1 for r in rows if r.hausdorff_flagged),
        rows=list(rows),
    )
