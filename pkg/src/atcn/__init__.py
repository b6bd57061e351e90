"""Attention-based temporal convolutional network with multi-scale dilation
for lifting 2-D joint windows to 3-D poses, on a small numpy autograd."""

__version__ = "0.1.0"

from .checkpoint import load_checkpoint, save_checkpoint
from .model import Model, ModelConfig, build, param_count, receptive_field
from .train import TrainConfig, train_loop

__all__ = [
    "Model",
    "ModelConfig",
    "TrainConfig",
    "build",
    "load_checkpoint",
    "param_count",
    "receptive_field",
    "save_checkpoint",
    "train_loop",
]
