"""
Shared command execution logic
Every CLI subcommand runs through run_command_execution so banners,
output directories, resolved configs and exit codes behave identically
"""

import logging
import traceback
from datetime import datetime
from pathlib import Path
from typing import Callable, Optional

from pidcount.errors import (
    CheckpointError,
    ConfigurationError,
    DatasetLoadError,
    DegenerateInputError,
    DimensionError,
    GenerationError,
    NumericalFailure,
    UndefinedMetricError,
    ValidationError,
)
from pidcount.run_config import RunConfig

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3

DATA_ERRORS = (
    DatasetLoadError,
    ValidationError,
    DimensionError,
    GenerationError,
    CheckpointError,
    DegenerateInputError,
    UndefinedMetricError,
)


def exit_code_for(error: BaseException) -> int:
    """Map an exception to the CLI exit code"""
    if isinstance(error, NumericalFailure):
        return EXIT_NUMERICAL
    if isinstance(error, ConfigurationError):
        return EXIT_USAGE
    if isinstance(error, DATA_ERRORS) or isinstance(error, OSError):
        return EXIT_DATA
    return EXIT_USAGE


def run_command_execution(
    command: Callable[[], None],
    target_output_dir: Optional[Path],
    run_type: str = "Run",
    config: Optional[RunConfig] = None,
) -> int:
    """
    Execute one pipeline command

    Args:
        command: Callable doing the work; raises on failure
        target_output_dir: Output directory (created first), or None for
            commands that only print
        run_type: Name for the log banners, e.g. "train"
        config: Resolved configuration written next to the outputs

    Returns:
        int: exit code (0 success, 1 usage/config, 2 data, 3 numerical failure)
    """
    try:
        logger.info("=" * 70)
        logger.info(f"PID-Net counting - {run_type} started")
        logger.info(f"Started at: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")
        if target_output_dir is not None:
            logger.info(f"Target output directory: {target_output_dir}")
        logger.info("=" * 70)

        if target_output_dir is not None:
            target_output_dir.mkdir(parents=True, exist_ok=True)
            logger.info(f"[OK] Output directory ready: {target_output_dir}")
            if config is not None:
                written = config.write(target_output_dir)
                logger.info(f"[OK] Resolved config written: {written}")

        command()

        logger.info("=" * 70)
        logger.info(f"[OK] {run_type} completed successfully!")
        logger.info(f"Completed at: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")
        if target_output_dir is not None:
            logger.info(f"Output saved to: {target_output_dir}")
        logger.info("=" * 70)
        return EXIT_OK

    except Exception as e:
        code = exit_code_for(e)
        logger.error(f"[ERROR] {run_type} failed: {e}")
        logger.error(traceback.format_exc())
        return code
