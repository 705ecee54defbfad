"""Minimal reverse-mode autodiff over dense 5-D tensors."""

from .checkpoint import read_checkpoint, save_checkpoint
from .ops import (
    add,
    concat_channels,
    conv3d,
    dice_ce_loss,
    instance_norm,
    max_pool3d,
    relu,
    scale,
    soft_dice_scores,
    softmax_channels,
    total,
    upsample_trilinear,
)
from .optim import adam_step, zero_grad
from .tensor import Parameter, Tensor, backward

__all__ = [
    "Parameter",
    "Tensor",
    "add",
    "adam_step",
    "backward",
    "concat_channels",
    "conv3d",
    "dice_ce_loss",
    "instance_norm",
    "max_pool3d",
    "read_checkpoint",
    "relu",
    "save_checkpoint",
    "scale",
    "soft_dice_scores",
    "softmax_channels",
    "total",
    "upsample_trilinear",
    "zero_grad",
]
