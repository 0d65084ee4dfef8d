"""
Settings and configuration for the PID-Net counting pipeline
"""

import os
from pathlib import Path
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

# Base paths
PROJECT_ROOT = Path(__file__).parent.parent
LOGS_DIR = Path(os.getenv('PIDCOUNT_LOGS_DIR', str(PROJECT_ROOT / "logs")))


def _env_int(name: str, default: int) -> int:
    """Read a positive integer from the environment, falling back to default"""
    raw = os.getenv(name)
    if raw is None or not raw.strip():
        return default
    try:
        value = int(raw)
    except ValueError:
        return default
    return value if value >= 1 else default


class PIDNetConfig:
    """Numeric defaults for the network, training, counting and baselines"""

    # Architecture
    IN_CHANNELS = 1
    BASE_WIDTH = 16  # toy default; full scale uses 64 and 256 x 256 inputs
    LEVELS = 4
    CLASSES = 2
    VARIANT = "pid"
    REDUCE_KERNEL = 3  # 5C -> C reduction conv
    DOWN_KERNEL = 3  # conv after max-pooling in the down path
    BOTTLENECK_DEPTH = 2
    FOREGROUND_CHANNEL = 1

    # Training (Adam, cross-entropy)
    LEARNING_RATE = 0.001
    BETA1 = 0.9
    BETA2 = 0.999
    ADAM_EPS = 1e-8
    BATCH_SIZE = 8
    EPOCHS = 100
    OPTIMIZER = "adam"
    MOMENTUM = 0.0
    SEED = 0
    PROB_CLAMP_EPS = 1e-7

    # Data
    IMAGE_SIZE = 256
    SIZE_MULTIPLE = 16
    SPLIT_RATIO = (3, 1, 1)
    AUGMENT_POLICY = "default"
    SYNTH_IMAGE_SIZE = 32
    SYNTH_COUNT_RANGE = (3, 12)
    SYNTH_NOISE_SIGMA = 0.05
    SYNTH_PLACEMENT_ATTEMPTS = 200
    MASK_THRESHOLD = 128  # 8-bit gray, foreground >= 128

    # Post-processing (morphological filter + 8-neighbourhood counting)
    PROB_THRESHOLD = 0.5
    MIN_AREA_AT_256 = 9
    OPENING = True

    # Classical baselines
    HOUGH_RADIUS_RANGE = (2, 12, 1)  # r_min, r_max, step
    HOUGH_THRESHOLD = 0.5  # fraction of the circumference voted
    HOUGH_NMS_RADIUS = 3
    EDGE_THRESHOLD = 0.25  # fraction of the maximum Sobel magnitude
    WATERSHED_SIGMA = 1.0
    WATERSHED_MIN_DISTANCE = 3
    FOREGROUND_BRIGHT = True

    # Checkpoint container
    CHECKPOINT_MAGIC = b"PIDNET1"
    CHECKPOINT_VERSION = 1


class Settings:
    """General application settings"""

    # Output settings
    CHECKPOINT_FILENAME = "best.ckpt"
    CURVES_FILENAME = "curves.csv"
    RESOLVED_CONFIG_FILENAME = "config.resolved.txt"
    SPLIT_FILENAME = "split.csv"
    COUNTS_FILENAME = "counts.csv"
    METRICS_CSV_FILENAME = "metrics.csv"
    METRICS_JSON_FILENAME = "metrics.json"
    METRICS_XLSX_FILENAME = "metrics.xlsx"
    COMPARISON_FILENAME = "comparison"
    TIMESTAMP_FORMAT = "%Y%m%d_%H%M%S"

    # Parallel per-image workers
    MAX_WORKERS = _env_int('PIDCOUNT_THREADS', 1)

    # Logging settings
    LOGS_DIR = LOGS_DIR
    LOG_LEVEL = os.getenv('PIDCOUNT_LOG_LEVEL', "INFO").upper()
    LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
