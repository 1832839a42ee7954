"""MICap: video captioning with audio-caption co-attention, on synthetic data."""

from .errors import ConfigError, DataError, MicapError, NumericError
from .harness import TrainConfig, evaluate, run_ablation, train
from .model import MICapModel, ModelConfig
from .synthdata import generate_dataset, read_archive, write_archive

__all__ = [
    "ConfigError", "DataError", "MicapError", "NumericError",
    "TrainConfig", "train", "evaluate", "run_ablation",
    "MICapModel", "ModelConfig",
    "generate_dataset", "read_archive", "write_archive",
]
__version__ = "0.1.0"
