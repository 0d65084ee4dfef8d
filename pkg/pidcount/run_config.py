"""
Run configuration files
`key = value` lines with `#` comments, flag overrides on top, and the
resolved record every run writes next to its outputs.
"""

import logging
import re
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Callable, Dict, Mapping, Optional, Tuple, Union

from config.settings import PIDNetConfig, Settings
from pidcount.classical_baselines import BaselineParams
from pidcount.data_pipeline import AugmentPolicy
from pidcount.errors import ConfigParseError, ConfigurationError
from pidcount.pidnet_model import ModelConfig, Variant
from pidcount.postproc_counting import PostprocParams
from pidcount.trainer import HyperParams

logger = logging.getLogger(__name__)

LINE_PATTERN = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*=\s*(.*?)\s*$")
NONE_WORDS = {"none", "auto", ""}


def _parse_int(raw: str) -> int:
    return int(raw)


def _parse_float(raw: str) -> float:
    return float(raw)


def _parse_bool(raw: str) -> bool:
    lowered = raw.lower()
    if lowered in ("true", "yes", "on", "1"):
        return True
    if lowered in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected true/false, got '{raw}'")


def _parse_str(raw: str) -> str:
    return raw


def _optional(parser: Callable[[str], Any]) -> Callable[[str], Any]:
    def parse(raw: str):
        return None if raw.lower() in NONE_WORDS else parser(raw)
    return parse


def parse_ratio(raw: str) -> Tuple[int, int, int]:
    parts = re.split(r"\s*:\s*", raw.strip())
    if len(parts) != 3:
        raise ValueError(f"expected a:b:c, got '{raw}'")
    return tuple(int(p) for p in parts)


def parse_range(raw: str) -> Tuple[int, int]:
    parts = re.split(r"\s*:\s*", raw.strip())
    if len(parts) != 2:
        raise ValueError(f"expected min:max, got '{raw}'")
    return int(parts[0]), int(parts[1])


@dataclass(frozen=True)
class RunConfig:
    """Every setting a command can use, flattened to one key per value"""

    command: Optional[str] = None
    data: Optional[str] = None
    out: Optional[str] = None
    ckpt: Optional[str] = None
    method: Optional[str] = None
    seed: int = PIDNetConfig.SEED
    threads: int = Settings.MAX_WORKERS
    # model
    variant: str = PIDNetConfig.VARIANT
    width: int = PIDNetConfig.BASE_WIDTH
    in_channels: int = PIDNetConfig.IN_CHANNELS
    reduce_kernel: int = PIDNetConfig.REDUCE_KERNEL
    down_kernel: int = PIDNetConfig.DOWN_KERNEL
    bottleneck_depth: int = PIDNetConfig.BOTTLENECK_DEPTH
    # training
    lr: float = PIDNetConfig.LEARNING_RATE
    beta1: float = PIDNetConfig.BETA1
    beta2: float = PIDNetConfig.BETA2
    eps: float = PIDNetConfig.ADAM_EPS
    batch_size: int = PIDNetConfig.BATCH_SIZE
    epochs: int = PIDNetConfig.EPOCHS
    optimizer: str = PIDNetConfig.OPTIMIZER
    momentum: float = PIDNetConfig.MOMENTUM
    prob_clamp_eps: float = PIDNetConfig.PROB_CLAMP_EPS
    # data
    image_size: Optional[int] = None
    augment_policy: str = PIDNetConfig.AUGMENT_POLICY
    split: Tuple[int, int, int] = PIDNetConfig.SPLIT_RATIO
    split_output: bool = False
    n_images: int = 64
    counts: Tuple[int, int] = PIDNetConfig.SYNTH_COUNT_RANGE
    noise_sigma: float = PIDNetConfig.SYNTH_NOISE_SIGMA
    # post-processing; min_area None scales the 256 x 256 default to the image size
    prob_threshold: float = PIDNetConfig.PROB_THRESHOLD
    min_area: Optional[int] = None
    opening: bool = PIDNetConfig.OPENING
    # baselines
    hough_r_min: int = PIDNetConfig.HOUGH_RADIUS_RANGE[0]
    hough_r_max: int = PIDNetConfig.HOUGH_RADIUS_RANGE[1]
    hough_r_step: int = PIDNetConfig.HOUGH_RADIUS_RANGE[2]
    hough_threshold: float = PIDNetConfig.HOUGH_THRESHOLD
    hough_nms_radius: int = PIDNetConfig.HOUGH_NMS_RADIUS
    edge_threshold: float = PIDNetConfig.EDGE_THRESHOLD
    watershed_sigma: float = PIDNetConfig.WATERSHED_SIGMA
    watershed_min_distance: int = PIDNetConfig.WATERSHED_MIN_DISTANCE
    foreground_bright: bool = PIDNetConfig.FOREGROUND_BRIGHT

    def __post_init__(self):
        self.validate()

    def validate(self):
        """Build every typed parameter group once so invalid values fail early"""
        self.model_config()
        self.hyper_params()
        self.postproc_params(self.image_size or PIDNetConfig.IMAGE_SIZE)
        self.baseline_params(self.image_size or PIDNetConfig.IMAGE_SIZE)
        AugmentPolicy.parse(self.augment_policy)
        if self.image_size is not None and (self.image_size < PIDNetConfig.SIZE_MULTIPLE
                                            or self.image_size % PIDNetConfig.SIZE_MULTIPLE):
            raise ConfigurationError(f"image_size must be a multiple of {PIDNetConfig.SIZE_MULTIPLE}, got {self.image_size}")
        if self.threads < 1:
            raise ConfigurationError(f"threads must be >= 1, got {self.threads}")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            in_channels=self.in_channels, base_width=self.width, variant=Variant.parse(self.variant),
            reduce_kernel=self.reduce_kernel, down_kernel=self.down_kernel, bottleneck_depth=self.bottleneck_depth,
        )

    def hyper_params(self) -> HyperParams:
        return HyperParams(
            lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps, batch_size=self.batch_size,
            epochs=self.epochs, seed=self.seed, optimizer=self.optimizer, momentum=self.momentum,
            prob_clamp_eps=self.prob_clamp_eps,
        )

    def postproc_params(self, size: int) -> PostprocParams:
        if self.min_area is None:
            return PostprocParams.for_size(size, prob_threshold=self.prob_threshold, opening=self.opening)
        return PostprocParams(prob_threshold=self.prob_threshold, min_area=self.min_area, opening=self.opening)

    def baseline_params(self, size: int) -> BaselineParams:
        return BaselineParams(
            hough_radius_range=(self.hough_r_min, self.hough_r_max, self.hough_r_step),
            hough_threshold=self.hough_threshold, hough_nms_radius=self.hough_nms_radius,
            edge_threshold=self.edge_threshold, watershed_sigma=self.watershed_sigma,
            watershed_min_distance=self.watershed_min_distance, foreground_bright=self.foreground_bright,
            postproc=self.postproc_params(size),
        )

    def to_text(self) -> str:
        lines = ["# resolved run configuration"]
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def write(self, directory: Union[str, Path]) -> Path:
        path = Path(directory) / Settings.RESOLVED_CONFIG_FILENAME
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text(), encoding="utf-8")
        return path


_PARSERS: Dict[str, Callable[[str], Any]] = {
    "command": _optional(_parse_str),
    "data": _optional(_parse_str),
    "out": _optional(_parse_str),
    "ckpt": _optional(_parse_str),
    "method": _optional(_parse_str),
    "seed": _parse_int,
    "threads": _parse_int,
    "variant": _parse_str,
    "width": _parse_int,
    "in_channels": _parse_int,
    "reduce_kernel": _parse_int,
    "down_kernel": _parse_int,
    "bottleneck_depth": _parse_int,
    "lr": _parse_float,
    "beta1": _parse_float,
    "beta2": _parse_float,
    "eps": _parse_float,
    "batch_size": _parse_int,
    "epochs": _parse_int,
    "optimizer": _parse_str,
    "momentum": _parse_float,
    "prob_clamp_eps": _parse_float,
    "image_size": _optional(_parse_int),
    "augment_policy": _parse_str,
    "split": parse_ratio,
    "split_output": _parse_bool,
    "n_images": _parse_int,
    "counts": parse_range,
    "noise_sigma": _parse_float,
    "prob_threshold": _parse_float,
    "min_area": _optional(_parse_int),
    "opening": _parse_bool,
    "hough_r_min": _parse_int,
    "hough_r_max": _parse_int,
    "hough_r_step": _parse_int,
    "hough_threshold": _parse_float,
    "hough_nms_radius": _parse_int,
    "edge_threshold": _parse_float,
    "watershed_sigma": _parse_float,
    "watershed_min_distance": _parse_int,
    "foreground_bright": _parse_bool,
}


def _format(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ":".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(key: str, value: Any) -> Any:
    if isinstance(value, str):
        return _PARSERS[key](value.strip())
    if key in ("split", "counts"):
        return tuple(int(v) for v in value)
    return value


def parse_config(path: Optional[Union[str, Path]] = None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """
    Build a RunConfig from an optional file plus overrides

    Args:
        path: Config file of `key = value` lines; `#` starts a comment
        overrides: Values from command-line flags; None entries are ignored
            and the rest win over the file

    Raises:
        ConfigParseError: malformed line, unknown key or unparsable value,
            citing the line number
        ConfigurationError: unknown override key or an invalid combination
    """
    values: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigurationError(f"cannot read config file {path}: {e}") from e
        for number, raw_line in enumerate(text.splitlines(), start=1):
            line = raw_line.split("#", 1)[0]
            if not line.strip():
                continue
            match = LINE_PATTERN.match(line)
            if not match:
                raise ConfigParseError(f"expected 'key = value', got '{raw_line.strip()}'", line=number, source=str(path))
            key, raw_value = match.group(1).lower(), match.group(2)
            if key not in _PARSERS:
                raise ConfigParseError(f"unknown key '{key}'", line=number, source=str(path))
            try:
                values[key] = _PARSERS[key](raw_value)
            except ValueError as e:
                raise ConfigParseError(f"bad value for '{key}': {e}", line=number, source=str(path)) from e

    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _PARSERS:
            raise ConfigurationError(f"unknown setting '{key}'")
        try:
            values[key] = _coerce(key, value)
        except (TypeError, ValueError) as e:
            raise ConfigurationError(f"bad value for '{key}': {e}") from e

    try:
        return RunConfig(**values)
    except ConfigurationError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigurationError(str(e)) from e


def with_overrides(config: RunConfig, **overrides) -> RunConfig:
    return replace(config, **{k: _coerce(k, v) for k, v in overrides.items() if v is not None})
