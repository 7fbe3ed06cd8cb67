"""Masked skeleton pretraining by hierarchical general-feature prediction, in NumPy."""

__version__ = "0.1.0"

from .errors import FormatError, GFPError, NumericError, StateError, ValidationError  # noqa: E402
from .model import GFPModel, ModelConfig, ntu_config  # noqa: E402
from .trainer import TrainConfig, desk_train_config, pretrain  # noqa: E402

__all__ = [
    "FormatError",
    "GFPError",
    "GFPModel",
    "ModelConfig",
    "NumericError",
    "StateError",
    "TrainConfig",
    "ValidationError",
    "desk_train_config",
    "ntu_config",
    "pretrain",
]
