"""
Utility functions for the counting pipeline
Logging setup and per-image worker fan-out
"""

import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime
from pathlib import Path
from typing import Callable, List, Optional, Sequence, TypeVar

from config.settings import Settings

T = TypeVar("T")
R = TypeVar("R")


def configure_logging(run_name: str, logs_dir: Optional[Path] = None, level: Optional[str] = None) -> Path:
    """
    Send log records to logs/<run_name>_<timestamp>.log and stdout

    Args:
        run_name: Prefix of the log file, usually the subcommand
        logs_dir: Directory for log files (default Settings.LOGS_DIR)
        level: Level name (default Settings.LOG_LEVEL)

    Returns:
        Path to the log file
    """
    log_dir = Path(logs_dir or Settings.LOGS_DIR)
    log_dir.mkdir(parents=True, exist_ok=True)
    log_file = log_dir / f"{run_name}_{datetime.now().strftime(Settings.TIMESTAMP_FORMAT)}.log"

    logging.basicConfig(
        level=getattr(logging, (level or Settings.LOG_LEVEL).upper(), logging.INFO),
        format=Settings.LOG_FORMAT,
        handlers=[
            logging.FileHandler(log_file, encoding='utf-8'),
            logging.StreamHandler(sys.stdout)
        ],
        force=True,
    )
    return log_file


def parallel_map(func: Callable[[T], R], items: Sequence[T], workers: Optional[int] = None) -> List[R]:
    """
    Apply func to every item, results in input order

    One worker runs inline; more use a thread pool capped by
    Settings.MAX_WORKERS unless `workers` is given.
    """
    workers = max(1, int(workers or Settings.MAX_WORKERS))
    if workers == 1 or len(items) < 2:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(func, items))
