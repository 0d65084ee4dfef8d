"""
Exception types raised across the pipeline
Each maps to one failure kind; the CLI turns them into exit codes
"""

from typing import Iterable, Optional


class PIDCountError(Exception):
    """Base class for every pipeline error"""


class DimensionError(PIDCountError, ValueError):
    """Tensor or mask shapes violate an operation's contract"""


class ConfigurationError(PIDCountError, ValueError):
    """Invalid configuration value, variant, size or split request"""


class ValidationError(PIDCountError, ValueError):
    """Input data does not satisfy a precondition (non-binary target, empty dataset)"""


class GraphStateError(PIDCountError, RuntimeError):
    """Backward called on a computation graph that was already consumed"""


class DatasetLoadError(PIDCountError, OSError):
    """Dataset directory is missing files or holds unpaired images/masks"""

    def __init__(self, message: str, orphans: Optional[Iterable[str]] = None):
        self.orphans = sorted(orphans) if orphans else []
        if self.orphans:
            message = f"{message}: {', '.join(self.orphans)}"
        super().__init__(message)


class GenerationError(PIDCountError, RuntimeError):
    """Synthetic data could not be generated with the requested parameters"""


class ConfigParseError(ConfigurationError):
    """Malformed or unknown line in a run-config file"""

    def __init__(self, message: str, line: Optional[int] = None, source: str = "config"):
        self.line = line
        self.source = source
        where = f"{source} line {line}" if line is not None else source
        super().__init__(f"{where}: {message}")


class NumericalFailure(PIDCountError, ArithmeticError):
    """Training produced a non-finite loss"""

    def __init__(self, epoch: int, batch: int, value: float):
        self.epoch = epoch
        self.batch = batch
        self.value = value
        super().__init__(f"Non-finite loss {value} at epoch {epoch}, batch {batch}")


class DegenerateInputError(PIDCountError, ValueError):
    """Input carries no usable structure (e.g. constant image for Otsu)"""


class UndefinedMetricError(PIDCountError, ValueError):
    """Metric is undefined for the given arguments"""


class CheckpointError(PIDCountError, OSError):
    """Checkpoint file has a bad magic string, unknown version or is truncated"""
