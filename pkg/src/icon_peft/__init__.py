"""Input-conditioned convolutional adapters for a from-scratch numpy ViT."""

from .adapters import (
    AdapterRecipe,
    ParameterRegistry,
    apply_freeze_policy,
    attach,
    build_model,
    count_parameters,
)
from .backbone import ViT, ViTConfig, attention_rollout, forward, preset
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import (
    ConfigError,
    DataError,
    DimensionError,
    IconPeftError,
    NumericalError,
    UsageError,
    ValidationError,
)
from .tensor import Tape, Tensor, conv2d_depthwise_dynamic, finite_diff_check
from .trainer import AdamW, TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "AdapterRecipe",
    "ConfigError",
    "DataError",
    "DimensionError",
    "IconPeftError",
    "NumericalError",
    "ParameterRegistry",
    "Tape",
    "Tensor",
    "TrainConfig",
    "UsageError",
    "ValidationError",
    "ViT",
    "ViTConfig",
    "apply_freeze_policy",
    "attach",
    "attention_rollout",
    "build_model",
    "conv2d_depthwise_dynamic",
    "count_parameters",
    "evaluate",
    "finite_diff_check",
    "forward",
    "load_checkpoint",
    "preset",
    "save_checkpoint",
    "train",
]
