"""Regional priority autoencoder (RPAE) for track anomaly detection, in plain numpy."""

from .checkpoint import load_checkpoint, save_checkpoint
from .model import BaselineModel, ModelConfig, RpaeModel
from .scoring import CategoryConfig, THIReport
from .training import TrainConfig, train, train_baseline

__version__ = "0.1.0"

__all__ = ["BaselineModel", "CategoryConfig", "ModelConfig", "RpaeModel", "THIReport",
           "TrainConfig", "load_checkpoint", "save_checkpoint", "train", "train_baseline"]
