"""
PID-Net assembly
Encoder blocks with max-pooling and pixel interval down-sampling branches,
hierarchical skip pyramid, transposed-convolution decoder, softmax head.
Also builds the M1 / M2 ablations and a plain U-Net baseline.
"""

import logging
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from config.settings import PIDNetConfig
from pidcount.checkpoint import load_checkpoint, save_checkpoint
from pidcount.errors import ConfigurationError, DimensionError
from pidcount.tensor_core import (
    Tensor,
    concat_channels,
    conv2d,
    conv_transpose2d,
    init_parameter,
    maxpool2d,
    pid_downsample,
    relu,
    softmax_channels,
)

logger = logging.getLogger(__name__)


class Variant(str, Enum):
    PID = "pid"
    M1 = "m1"  # max-pooling branch only in the down path
    M2 = "m2"  # pixel interval branch only in the down path
    UNET = "unet"

    @classmethod
    def parse(cls, value: Union[str, "Variant"]) -> "Variant":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            choices = ", ".join(v.value for v in cls)
            raise ConfigurationError(f"Unsupported variant '{value}' (choose from {choices})") from None

    @property
    def uses_pid(self) -> bool:
        return self in (Variant.PID, Variant.M2)

    @property
    def uses_pool_branch(self) -> bool:
        return self in (Variant.PID, Variant.M1)

    @property
    def hierarchical_skips(self) -> bool:
        return self is not Variant.UNET


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters"""

    in_channels: int = PIDNetConfig.IN_CHANNELS
    base_width: int = PIDNetConfig.BASE_WIDTH
    levels: int = PIDNetConfig.LEVELS
    classes: int = PIDNetConfig.CLASSES
    variant: Variant = Variant(PIDNetConfig.VARIANT)
    reduce_kernel: int = PIDNetConfig.REDUCE_KERNEL
    down_kernel: int = PIDNetConfig.DOWN_KERNEL
    bottleneck_depth: int = PIDNetConfig.BOTTLENECK_DEPTH

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant.parse(self.variant))
        self.validate()

    def validate(self):
        if self.in_channels not in (1, 3):
            raise ConfigurationError(f"in_channels must be 1 (grayscale) or 3 (color), got {self.in_channels}")
        if self.base_width < 1:
            raise ConfigurationError(f"base_width must be >= 1, got {self.base_width}")
        if self.levels != 4:
            raise ConfigurationError(f"PID-Net uses exactly 4 encoder/decoder levels, got {self.levels}")
        if self.classes != 2:
            raise ConfigurationError(f"PID-Net segments 2 classes, got {self.classes}")
        for name in ("reduce_kernel", "down_kernel"):
            k = getattr(self, name)
            if k < 1 or k % 2 == 0:
                raise ConfigurationError(f"{name} must be a positive odd integer, got {k}")
        if self.bottleneck_depth < 1:
            raise ConfigurationError(f"bottleneck_depth must be >= 1, got {self.bottleneck_depth}")

    @property
    def size_multiple(self) -> int:
        return 2 ** self.levels

    def width(self, level: int) -> int:
        """Channels of encoder block `level` (1-based): C, 2C, 4C, 8C"""
        return self.base_width * 2 ** (level - 1)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["variant"] = self.variant.value
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"Unknown model config keys: {', '.join(sorted(unknown))}")
        return cls(**data)


@dataclass
class OpSpec:
    kind: str
    detail: str = ""


@dataclass
class BlockSpec:
    name: str
    scale: int  # resolution divisor relative to the input
    ops: List[OpSpec] = field(default_factory=list)


@dataclass
class _Layout:
    params: List[Tuple[str, Tuple[int, ...], int]]  # name, shape, fan_in
    blocks: List[BlockSpec]


def _decoder_skip_levels(variant: Variant, level: int) -> List[int]:
    """Encoder levels feeding decoder `level`; decoder level 1 sits at encoder level 4's resolution"""
    target = 5 - level
    if variant.hierarchical_skips:
        return list(range(1, target + 1))
    return [target]


def _layout(config: ModelConfig) -> _Layout:
    params: List[Tuple[str, Tuple[int, ...], int]] = []
    blocks: List[BlockSpec] = []
    variant = config.variant

    def conv(name: str, cin: int, cout: int, k: int, block: BlockSpec, prefix: str = "", act: bool = True):
        params.append((f"{name}.weight", (cout, cin, k, k), cin * k * k))
        params.append((f"{name}.bias", (cout,), cin * k * k))
        block.ops.append(OpSpec(f"{prefix}conv{k}x{k}", f"{cin}->{cout}"))
        if act:
            block.ops.append(OpSpec(f"{prefix}relu"))

    prev = config.in_channels
    for level in range(1, config.levels + 1):
        cb = config.width(level)
        block = BlockSpec(f"encoder{level}", 2 ** (level - 1))
        conv(f"enc{level}.conv1", prev, cb, 3, block)
        conv(f"enc{level}.conv2", cb, cb, 3, block)
        parts = []
        if variant.uses_pid:
            block.ops.append(OpSpec("down.pid", f"{cb}->{4 * cb}"))
            parts.append(4 * cb)
        if variant.uses_pool_branch:
            block.ops.append(OpSpec("down.maxpool2x2", f"{cb}->{cb}"))
            conv(f"enc{level}.pool_conv", cb, cb, config.down_kernel, block, prefix="down.")
            parts.append(cb)
        if variant is Variant.UNET:
            block.ops.append(OpSpec("down.maxpool2x2", f"{cb}->{cb}"))
        if variant.uses_pid:
            if len(parts) > 1:
                block.ops.append(OpSpec("down.concat", f"parts={len(parts)} channels={sum(parts)}"))
            conv(f"enc{level}.reduce", sum(parts), cb, config.reduce_kernel, block, prefix="down.")
        blocks.append(block)
        prev = cb

    bottleneck_width = 2 * config.width(config.levels)
    block = BlockSpec("bottleneck", 2 ** config.levels)
    for depth in range(1, config.bottleneck_depth + 1):
        conv(f"bottleneck.conv{depth}", prev, bottleneck_width, 3, block)
        prev = bottleneck_width
    blocks.append(block)

    pyramid = BlockSpec("skip_pyramid", 1)
    for level in range(1, config.levels + 1):
        target = 5 - level
        for source in _decoder_skip_levels(variant, level):
            pools = target - source
            name = f"maxpool{2 ** pools}x" if pools else "copy"
            pyramid.ops.append(OpSpec(name, f"encoder{source}->decoder{level}"))
    blocks.append(pyramid)

    for level in range(1, config.levels + 1):
        target = 5 - level
        ct = config.width(target)
        block = BlockSpec(f"decoder{level}", 2 ** (target - 1))
        params.append((f"dec{level}.up.weight", (prev, ct, 3, 3), prev * 9))
        params.append((f"dec{level}.up.bias", (ct,), prev * 9))
        block.ops.append(OpSpec("up.conv_transpose3x3", f"{prev}->{ct}"))
        skip_channels = [config.width(s) for s in _decoder_skip_levels(variant, level)]
        concat_width = ct + sum(skip_channels)
        block.ops.append(OpSpec("concat", f"parts={1 + len(skip_channels)} channels={concat_width}"))
        conv(f"dec{level}.conv1", concat_width, ct, 3, block)
        conv(f"dec{level}.conv2", ct, ct, 3, block)
        blocks.append(block)
        prev = ct

    head = BlockSpec("head", 1)
    conv("head", prev, config.classes, 1, head, act=False)
    head.ops.append(OpSpec("softmax", f"channels={config.classes}"))
    blocks.append(head)
    return _Layout(params=params, blocks=blocks)


class Model:
    """PID-Net (or ablation) parameters plus the forward pass over them"""

    def __init__(self, config: ModelConfig, params: Dict[str, Tensor], seed: Optional[int] = None):
        self.config = config
        self.params = params
        self.seed = seed
        self.topology = _layout(config).blocks

    def _conv(self, name: str, x: Tensor) -> Tensor:
        weight = self.params[f"{name}.weight"]
        return conv2d(x, weight, self.params[f"{name}.bias"], stride=1, padding=weight.shape[2] // 2)

    def _conv_relu(self, name: str, x: Tensor) -> Tensor:
        return relu(self._conv(name, x))

    def encoder_block(self, features: Tensor, level: int) -> Tuple[Tensor, Tensor]:
        """
        Run encoder block `level`

        Args:
            features: (N, Cin, H, W) with even H and W
            level: 1..4

        Returns:
            (skip at H x W with 2^(level-1) * C channels, down-sampled output at H/2 x W/2)
        """
        if features.ndim != 4 or features.shape[2] % 2 or features.shape[3] % 2:
            raise DimensionError(f"encoder block {level} needs even spatial extents, got {features.shape}")
        x = self._conv_relu(f"enc{level}.conv1", features)
        skip = self._conv_relu(f"enc{level}.conv2", x)

        variant = self.config.variant
        if variant is Variant.UNET:
            return skip, maxpool2d(skip)
        parts = []
        if variant.uses_pid:
            parts.append(pid_downsample(skip))
        if variant.uses_pool_branch:
            parts.append(self._conv_relu(f"enc{level}.pool_conv", maxpool2d(skip)))
        if not variant.uses_pid:
            return skip, parts[0]
        merged = concat_channels(parts) if len(parts) > 1 else parts[0]
        return skip, self._conv_relu(f"enc{level}.reduce", merged)

    def bottleneck(self, features: Tensor) -> Tensor:
        x = features
        for depth in range(1, self.config.bottleneck_depth + 1):
            x = self._conv_relu(f"bottleneck.conv{depth}", x)
        return x

    def skip_pyramid(self, encoder_skips: Sequence[Tensor]) -> List[List[Tensor]]:
        """
        Prepare the skip inputs of every decoder level

        Shallower encoder features are max-pooled 2x / 4x / 8x down to the
        decoder level's resolution; the same-level skip is passed through.
        Index 0 of the result feeds decoder level 1.
        """
        if len(encoder_skips) != self.config.levels:
            raise DimensionError(f"skip_pyramid expects {self.config.levels} encoder skips, got {len(encoder_skips)}")
        pooled: Dict[Tuple[int, int], Tensor] = {}

        def pooled_to(source: int, target: int) -> Tensor:
            key = (source, target)
            if key not in pooled:
                pooled[key] = encoder_skips[source - 1] if source == target else maxpool2d(pooled_to(source, target - 1))
            return pooled[key]

        result = []
        for level in range(1, self.config.levels + 1):
            target = 5 - level
            result.append([pooled_to(source, target) for source in _decoder_skip_levels(self.config.variant, level)])
        return result

    def decoder_block(self, features: Tensor, skips: Sequence[Tensor], level: int) -> Tensor:
        """Up-sample, concatenate [up-sampled, skips...], then two conv + ReLU"""
        up = conv_transpose2d(features, self.params[f"dec{level}.up.weight"], self.params[f"dec{level}.up.bias"])
        for skip in skips:
            if skip.shape[2:] != up.shape[2:]:
                raise DimensionError(
                    f"decoder {level}: skip at {skip.shape[2:]} does not match up-sampled {up.shape[2:]}"
                )
        x = concat_channels([up, *skips])
        x = self._conv_relu(f"dec{level}.conv1", x)
        return self._conv_relu(f"dec{level}.conv2", x)

    def forward(self, batch: Union[Tensor, np.ndarray]) -> Tensor:
        """
        Per-pixel two-class probabilities

        Args:
            batch: (N, in_channels, H, W), H and W divisible by 16

        Returns:
            Tensor (N, 2, H, W); channel 1 is the foreground probability
        """
        if not isinstance(batch, Tensor):
            batch = Tensor(batch, dtype=self.dtype)
        multiple = self.config.size_multiple
        if batch.ndim != 4 or batch.shape[1] != self.config.in_channels:
            raise DimensionError(
                f"expected input (N, {self.config.in_channels}, H, W), got {batch.shape}"
            )
        if batch.shape[2] % multiple or batch.shape[3] % multiple:
            raise DimensionError(f"input {batch.shape[2]} x {batch.shape[3]} is not divisible by {multiple}")

        skips = []
        x = batch
        for level in range(1, self.config.levels + 1):
            skip, x = self.encoder_block(x, level)
            skips.append(skip)
        x = self.bottleneck(x)
        for level, level_skips in enumerate(self.skip_pyramid(skips), start=1):
            x = self.decoder_block(x, level_skips, level)
        return softmax_channels(self._conv("head", x))

    __call__ = forward

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def parameters(self) -> Dict[str, Tensor]:
        return self.params

    def count_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def parameter_arrays(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def with_parameters(self, arrays: Mapping[str, np.ndarray]) -> "Model":
        """Copy of this model carrying the given parameter values"""
        if set(arrays) != set(self.params):
            missing = sorted(set(self.params) - set(arrays))
            extra = sorted(set(arrays) - set(self.params))
            raise ConfigurationError(f"parameter names differ (missing {missing}, unexpected {extra})")
        params = {}
        for name, current in self.params.items():
            value = np.asarray(arrays[name])
            if value.shape != current.shape:
                raise DimensionError(f"parameter '{name}' has shape {value.shape}, expected {current.shape}")
            params[name] = Tensor(value, requires_grad=True, dtype=current.dtype)
        return Model(self.config, params, seed=self.seed)

    def topology_dump(self) -> str:
        lines = [
            f"model variant={self.config.variant.value} base_width={self.config.base_width} "
            f"in_channels={self.config.in_channels} parameters={self.count_parameters()}"
        ]
        for block in self.topology:
            lines.append(f"{block.name} @H/{block.scale}")
            for op in block.ops:
                lines.append(f"  {op.kind} {op.detail}".rstrip())
        return "\n".join(lines)

    def save(self, path: Union[str, Path], **metadata) -> Path:
        meta = {"model": self.config.to_dict(), "seed": self.seed}
        meta.update(metadata)
        return save_checkpoint(path, self.parameter_arrays(), meta)

    @classmethod
    def load(cls, path: Union[str, Path]) -> Tuple["Model", Dict[str, Any]]:
        arrays, metadata = load_checkpoint(path)
        if "model" not in metadata:
            raise ConfigurationError(f"checkpoint {path} carries no model configuration")
        config = ModelConfig.from_dict(metadata["model"])
        template = build_model(config, seed=0)
        model = template.with_parameters(arrays)
        model.seed = metadata.get("seed")
        logger.info(f"[OK] Loaded {config.variant.value} model ({model.count_parameters()} parameters) from {path}")
        return model, metadata


def build_model(config: ModelConfig, seed: int, dtype=np.float32) -> Model:
    """
    Create a model with seeded uniform(+-sqrt(1/fan_in)) initialization

    Same (config, seed, dtype) gives bit-identical parameters.
    """
    if not isinstance(config, ModelConfig):
        raise ConfigurationError(f"expected ModelConfig, got {type(config).__name__}")
    rng = np.random.default_rng(seed)
    params = {
        name: init_parameter(shape, fan_in, rng, dtype=dtype)
        for name, shape, fan_in in _layout(config).params
    }
    return Model(config, params, seed=seed)
