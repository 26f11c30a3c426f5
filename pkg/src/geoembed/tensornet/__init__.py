"""Minimal dense-tensor neural network engine with reverse-mode gradients."""

from .layers import (
    Activation,
    BatchNorm,
    BatchTooSmall,
    Conv2d,
    Dense,
    Layer,
    MaxPool2d,
    MaxUnpool2d,
    Roll,
    TransposeConv2d,
    Unroll,
)
from .network import Network
from .ops import (
    ShapeMismatch,
    conv2d,
    conv_output_size,
    max_pool,
    max_unpool,
    transpose_conv2d,
)
from .train import Adam, EpochRecord, NonFiniteLoss, TrainConfig, TrainLog, train_loop

__all__ = [
    "Activation",
    "Adam",
    "BatchNorm",
    "BatchTooSmall",
    "Conv2d",
    "Dense",
    "EpochRecord",
    "Layer",
    "MaxPool2d",
    "MaxUnpool2d",
    "Network",
    "NonFiniteLoss",
    "Roll",
    "ShapeMismatch",
    "TrainConfig",
    "TrainLog",
    "TransposeConv2d",
    "Unroll",
    "conv2d",
    "conv_output_size",
    "max_pool",
    "max_unpool",
    "train_loop",
    "transpose_conv2d",
]
