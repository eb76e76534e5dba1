"""Two-network segmentation training that corrects its own noisy labels."""

from .core import (ArchConfig, DatasetManifest, LabelRecord, LabelSource, MetricsReport, Quality, Sample,
                   SeededRng, TrainConfig, ValidationError, load_config, load_manifest, load_split)
from .trainer import Monitor, TrainResult, train, train_supervised

__all__ = [
    "ArchConfig", "DatasetManifest", "LabelRecord", "LabelSource", "MetricsReport", "Monitor", "Quality",
    "Sample", "SeededRng", "TrainConfig", "TrainResult", "ValidationError", "load_config", "load_manifest",
    "load_split", "train", "train_supervised",
]

__version__ = "0.1.0"
