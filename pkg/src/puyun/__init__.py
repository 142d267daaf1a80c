"""PuYun: a large-kernel-attention convolutional weather model on a numpy autodiff core."""

from .data import Dataset, generate_synthetic, load_dataset
from .errors import (ConfigError, DataError, NumericError, PuYunError, ShapeError,
                     UndefinedACCError, UsageError)
from .estimator import PuYunCascade, PuYunForecaster, desk_dataset
from .forecast import cascade_rollout, rollout
from .grid import GridSpec, VariableSet, make_grid
from .model import ModelConfig, forward, init_parameters, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "Dataset", "GridSpec", "ModelConfig", "NumericError",
    "PuYunCascade", "PuYunError", "PuYunForecaster", "ShapeError", "UndefinedACCError",
    "UsageError", "VariableSet", "cascade_rollout", "desk_dataset", "forward",
    "generate_synthetic", "init_parameters", "load_checkpoint", "load_dataset", "make_grid",
    "rollout", "save_checkpoint",
]
