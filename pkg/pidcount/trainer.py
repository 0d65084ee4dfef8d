"""
Training loop
Cross-entropy loss, Adam (or SGD) updates, per-epoch loss/IoU curves and
best-validation-IoU checkpoint selection.
"""

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from config.settings import PIDNetConfig
from pidcount.data_pipeline import Sample, stack_batch
from pidcount.errors import ConfigurationError, NumericalFailure, ValidationError
from pidcount.metrics import confusion, segmentation_metrics
from pidcount.pidnet_model import Model
from pidcount.postproc_counting import binarize
from pidcount.tensor_core import (
    AdamState,
    SGDState,
    Tensor,
    adam_step,
    backward,
    cross_entropy_loss,
    no_grad,
    sgd_step,
    zero_grad,
)

logger = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "sgd")
CURVE_COLUMNS = ("epoch", "train_loss", "train_iou", "val_loss", "val_iou")


@dataclass(frozen=True)
class HyperParams:
    lr: float = PIDNetConfig.LEARNING_RATE
    beta1: float = PIDNetConfig.BETA1
    beta2: float = PIDNetConfig.BETA2
    eps: float = PIDNetConfig.ADAM_EPS
    batch_size: int = PIDNetConfig.BATCH_SIZE
    epochs: int = PIDNetConfig.EPOCHS
    seed: int = PIDNetConfig.SEED
    optimizer: str = PIDNetConfig.OPTIMIZER
    momentum: float = PIDNetConfig.MOMENTUM
    prob_clamp_eps: float = PIDNetConfig.PROB_CLAMP_EPS

    def __post_init__(self):
        object.__setattr__(self, "optimizer", str(self.optimizer).lower())
        self.validate()

    def validate(self):
        # lr = 0 is accepted for frozen-parameter runs
        if self.lr < 0:
            raise ConfigurationError(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigurationError(f"Adam betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.eps <= 0:
            raise ConfigurationError(f"eps must be > 0, got {self.eps}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"optimizer must be one of {OPTIMIZERS}, got '{self.optimizer}'")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError(f"momentum must lie in [0, 1), got {self.momentum}")


@dataclass
class TrainingCurves:
    """Per-epoch series; index 0 is epoch 1"""

    train_loss: List[float] = field(default_factory=list)
    train_iou: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    val_iou: List[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.val_iou)

    @property
    def best_epoch(self) -> int:
        """0-based index of the highest validation IoU, earliest on ties"""
        if not self.val_iou:
            raise ValidationError("no epochs recorded")
        return int(np.argmax(self.val_iou))

    def append(self, train_loss: float, train_iou: float, val_loss: float, val_iou: float):
        self.train_loss.append(float(train_loss))
        self.train_iou.append(float(train_iou))
        self.val_loss.append(float(val_loss))
        self.val_iou.append(float(val_iou))

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(CURVE_COLUMNS)
            for epoch, row in enumerate(zip(self.train_loss, self.train_iou, self.val_loss, self.val_iou), start=1):
                writer.writerow([epoch, *(repr(v) for v in row)])
        return path

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "TrainingCurves":
        curves = cls()
        with open(path, newline="", encoding="utf-8") as handle:
            reader = csv.DictReader(handle)
            if tuple(reader.fieldnames or ()) != CURVE_COLUMNS:
                raise ValidationError(f"{path} is not a curves file (columns {reader.fieldnames})")
            for row in reader:
                curves.append(float(row["train_loss"]), float(row["train_iou"]),
                              float(row["val_loss"]), float(row["val_iou"]))
        return curves


def _batches(samples: Sequence[Sample], order: Sequence[int], batch_size: int):
    for start in range(0, len(order), batch_size):
        yield [samples[i] for i in order[start:start + batch_size]]


def _image_ious(probs: np.ndarray, masks: np.ndarray) -> List[float]:
    predictions = binarize(probs)
    return [segmentation_metrics(confusion(p, m))[2] for p, m in zip(predictions, masks)]


def evaluate_epoch(model: Model, dataset: Sequence[Sample], batch_size: int = PIDNetConfig.BATCH_SIZE,
                   eps: float = PIDNetConfig.PROB_CLAMP_EPS) -> Tuple[float, float]:
    """
    Mean loss and mean per-image IoU with gradients disabled

    IoU compares argmax-binarized predictions (background wins ties) against
    the masks. Parameters are not touched.
    """
    if not dataset:
        raise ValidationError("evaluate_epoch needs at least one sample")
    loss_sum = 0.0
    ious: List[float] = []
    with no_grad():
        for batch in _batches(dataset, range(len(dataset)), batch_size):
            images, masks = stack_batch(batch)
            probs = model.forward(Tensor(images, dtype=model.dtype))
            loss_sum += cross_entropy_loss(probs, masks, eps).item() * len(batch)
            ious.extend(_image_ious(probs.data, masks))
    return loss_sum / len(dataset), float(np.mean(ious))


def predict(model: Model, samples: Sequence[Sample], batch_size: int = PIDNetConfig.BATCH_SIZE) -> List[np.ndarray]:
    """Per-sample (2, H, W) probability maps"""
    outputs: List[np.ndarray] = []
    with no_grad():
        for batch in _batches(samples, range(len(samples)), batch_size):
            images, _ = stack_batch(batch)
            probs = model.forward(Tensor(images, dtype=model.dtype))
            outputs.extend(np.array(p) for p in probs.data)
    return outputs


def train(model: Model, train_set: Sequence[Sample], val_set: Sequence[Sample],
          hyper: HyperParams = HyperParams()) -> Tuple[Model, TrainingCurves]:
    """
    Train in place and return the best-validation-IoU snapshot

    Each epoch shuffles with a generator seeded from (seed, epoch), runs every
    mini-batch including the last partial one, then evaluates the validation
    set. The snapshot is replaced only on a strictly higher validation IoU.

    Args:
        model: Model to optimize (its parameters are updated)
        train_set: Training samples, all the same size
        val_set: Validation samples
        hyper: Optimizer and loop settings

    Returns:
        (best model copy, TrainingCurves)

    Raises:
        NumericalFailure: a batch loss is NaN or infinite
    """
    if not train_set:
        raise ValidationError("training set is empty")
    if not val_set:
        raise ValidationError("validation set is empty")

    params = model.parameters()
    state: Union[AdamState, SGDState]
    if hyper.optimizer == "adam":
        state = AdamState.for_parameters(params)
    else:
        state = SGDState.for_parameters(params)

    curves = TrainingCurves()
    best_iou = -math.inf
    best_arrays = model.parameter_arrays()
    logger.info(
        f"[INFO] Training {model.config.variant.value} ({model.count_parameters()} parameters) on "
        f"{len(train_set)} samples, validating on {len(val_set)}, {hyper.epochs} epochs"
    )

    for epoch in range(1, hyper.epochs + 1):
        order = np.random.default_rng([hyper.seed, epoch]).permutation(len(train_set))
        loss_sum = 0.0
        ious: List[float] = []
        for batch_index, batch in enumerate(_batches(train_set, order, hyper.batch_size), start=1):
            images, masks = stack_batch(batch)
            zero_grad(params.values())
            probs = model.forward(Tensor(images, dtype=model.dtype))
            loss = cross_entropy_loss(probs, masks, hyper.prob_clamp_eps)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalFailure(epoch, batch_index, value)
            ious.extend(_image_ious(probs.data, masks))
            backward(loss, params.values())
            grads = {name: p.grad for name, p in params.items()}
            if hyper.optimizer == "adam":
                adam_step(params, grads, state, hyper.lr, hyper.beta1, hyper.beta2, hyper.eps)
            else:
                sgd_step(params, grads, state, hyper.lr, hyper.momentum)
            loss_sum += value * len(batch)

        val_loss, val_iou = evaluate_epoch(model, val_set, hyper.batch_size, hyper.prob_clamp_eps)
        curves.append(loss_sum / len(train_set), float(np.mean(ious)), val_loss, val_iou)
        if val_iou > best_iou:
            best_iou = val_iou
            best_arrays = model.parameter_arrays()
        logger.info(
            f"[INFO] Epoch {epoch}/{hyper.epochs} - train loss {curves.train_loss[-1]:.4f} "
            f"iou {curves.train_iou[-1]:.4f} | val loss {val_loss:.4f} iou {val_iou:.4f}"
        )

    logger.info(f"[OK] Best validation IoU {best_iou:.4f} at epoch {curves.best_epoch + 1}")
    return model.with_parameters(best_arrays), curves
