"""Minimal differentiable operator core used by the CDUA network."""

from . import kernels
from .checkpoint import CheckpointError, load_params, save_params
from .gradcheck import finite_diff_check
from .layers import AttentionBlock, Conv1d, Dense, GroupNorm, Layer, ResidualBlock, Upsample
from .optim import ParamStore, adam_step
from .tensor import Tensor, no_grad

__all__ = [
    "AttentionBlock", "CheckpointError", "Conv1d", "Dense", "GroupNorm", "Layer", "ParamStore",
    "ResidualBlock", "Tensor", "Upsample", "adam_step", "finite_diff_check", "kernels",
    "load_params", "no_grad", "save_params",
]
