"""Buffered traffic-light right-of-way recognition in numpy.

An image buffer of N frames passes through a small residual backbone; one
learnable query walks the buffer with temporal self-attention over earlier
embeddings and deformable cross-attention into each frame's feature map; two
multi-centre arcface heads read the final embedding, one per driving
direction.
"""
from .config import ModelConfig, TrainConfig, load_run_config
from .errors import (
    CheckpointError,
    ConfigError,
    ConfigMismatchError,
    ContractError,
    DataError,
    LightFormerError,
    NumericError,
    ParseError,
    ShapeError,
    TruncationError,
    VersionError,
)
from .estimator import LightFormerClassifier, check_buffers, check_labels
from .model import LightFormer, ModelOutput
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConfigError",
    "ConfigMismatchError",
    "ContractError",
    "DataError",
    "LightFormer",
    "LightFormerClassifier",
    "LightFormerError",
    "ModelConfig",
    "ModelOutput",
    "NumericError",
    "ParseError",
    "ShapeError",
    "Tensor",
    "TrainConfig",
    "TruncationError",
    "VersionError",
    "check_buffers",
    "check_labels",
    "load_run_config",
    "no_grad",
]
