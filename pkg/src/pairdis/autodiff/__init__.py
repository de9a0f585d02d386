"""Deterministic reverse-mode tensor substrate: engine, oracle, optimizer, checkpoints."""

from .checkpoint import CheckpointError, load_checkpoint, manifest_path, save_checkpoint
from .gradcheck import ProbeFailure, finite_diff_check
from .optim import Adam, PoisonedGradientError
from .tensor import (
    GraphError,
    NonFiniteError,
    ShapeError,
    Tensor,
    clamp,
    concat,
    conv2d,
    conv2d_transpose,
    dense,
    maximum_const,
    maxpool2,
    sigmoid,
    upsample2,
)

__all__ = [
    "Adam",
    "CheckpointError",
    "GraphError",
    "NonFiniteError",
    "PoisonedGradientError",
    "ProbeFailure",
    "ShapeError",
    "Tensor",
    "clamp",
    "concat",
    "conv2d",
    "conv2d_transpose",
    "dense",
    "finite_diff_check",
    "load_checkpoint",
    "manifest_path",
    "maximum_const",
    "maxpool2",
    "save_checkpoint",
    "sigmoid",
    "upsample2",
]
