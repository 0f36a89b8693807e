"""Minimal dense tensor kernel with reverse-mode differentiation."""

from .ops import (
    add,
    affine,
    avgpool2d_3x3_same,
    avgpool2d_3x3_same_array,
    clamp,
    concat_channels,
    conv2d,
    conv_transpose2d,
    crop2d,
    depthwise_conv2d,
    log,
    mul,
    pow_const,
    relu,
    sigmoid,
    sub,
    sum_all,
    upsample_bilinear,
    upsample_nearest,
)
from .tensor import AutodiffError, ShapeError, Tape, Tensor, backward, zero_grad

__all__ = [
    "AutodiffError",
    "ShapeError",
    "Tape",
    "Tensor",
    "add",
    "affine",
    "avgpool2d_3x3_same",
    "avgpool2d_3x3_same_array",
    "backward",
    "clamp",
    "concat_channels",
    "conv2d",
    "conv_transpose2d",
    "crop2d",
    "depthwise_conv2d",
    "log",
    "mul",
    "pow_const",
    "relu",
    "sigmoid",
    "sub",
    "sum_all",
    "upsample_bilinear",
    "upsample_nearest",
    "zero_grad",
]
