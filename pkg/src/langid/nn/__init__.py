"""Model definition: configuration, parameters, layers and the classifier."""

from .config import BlockConfig, ModelConfig, load_config, preset
from .model import Batch, Model, softmax
from .params import (CheckpointError, ParameterSet, count_params, init_params, load_checkpoint,
                     param_layout, read_checkpoint, save_checkpoint)

__all__ = [
    "Batch", "BlockConfig", "CheckpointError", "Model", "ModelConfig", "ParameterSet",
    "count_params", "init_params", "load_checkpoint", "load_config", "param_layout", "preset",
    "read_checkpoint", "save_checkpoint", "softmax",
]
