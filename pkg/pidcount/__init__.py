"""
PID-Net cell segmentation and counting
Numpy tensor engine, PID-Net and its ablations, training, counting
post-processing, evaluation metrics and classical baselines
"""

__version__ = "1.0.0"

__all__ = [
    "classical_baselines",
    "cli",
    "data_pipeline",
    "metrics",
    "pidnet_model",
    "postproc_counting",
    "tensor_core",
    "trainer",
]
