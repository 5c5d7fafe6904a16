"""Per-pixel quantile regression of a scalar field from multispectral raster stacks."""

from .losses import LossConfig, QuantileSpec, aggregate_loss, check_loss, smoothed_check
from .metrics import MetricsReport, evaluate
from .model import ModelConfig, QuantileUNet, build_model, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, predict, train

__all__ = [
    "LossConfig",
    "MetricsReport",
    "ModelConfig",
    "QuantileSpec",
    "QuantileUNet",
    "TrainConfig",
    "aggregate_loss",
    "build_model",
    "check_loss",
    "evaluate",
    "load_checkpoint",
    "predict",
    "save_checkpoint",
    "smoothed_check",
    "train",
]
