"""Layer-wise trained CNN base predictor for daily market direction, with
partial and complete fine-tuning for new markets."""

from .model import ArchitectureConfig, Model, build_base_cnn, build_subcnn, load_model, save_model
from .training import TrainConfig, fine_tune_complete, fine_tune_partial, layerwise_train, train

__version__ = "0.1.0"

__all__ = [
    "ArchitectureConfig", "Model", "TrainConfig", "build_base_cnn", "build_subcnn",
    "fine_tune_complete", "fine_tune_partial", "layerwise_train", "load_model", "save_model", "train",
]
