"""Minimal reverse-mode autodiff over float64 numpy arrays."""
from .adam import AdamState, adam_step
from .gradcheck import GradCheckReport, grad_check, rel_error
from .ops import (
    add,
    concat_channels,
    conv3d,
    conv3d_reference,
    cross_entropy_voxelwise,
    instance_norm,
    leaky_relu,
    mul,
    nearest_upsample2x,
    one_hot,
    scale,
    softmax_channels,
    softmax_cross_entropy,
    tensor_sum,
)
from .tensor import Graph, NodeRecord, Tensor, backward

__all__ = [
    "AdamState", "Graph", "GradCheckReport", "NodeRecord", "Tensor",
    "adam_step", "add", "backward", "concat_channels", "conv3d", "conv3d_reference",
    "cross_entropy_voxelwise", "grad_check", "instance_norm", "leaky_relu", "mul",
    "nearest_upsample2x", "one_hot", "rel_error", "scale", "softmax_channels",
    "softmax_cross_entropy", "tensor_sum",
]
