"""Reverse-mode autodiff over numpy arrays, layers, AdamW and gradient checks."""

from . import ops
from .gradcheck import GradCheckReport, finite_diff_check, rel_error
from .layers import (MLP, ConfigError, Embedding, LayerNorm, Linear, Module, ModuleList, MultiHeadAttention,
                     multi_head_attention)
from .optim import AdamW, MissingGradientError, OptimizerState, adamw_step
from .position import VISUAL_POSITION, bucket_matrix, relative_position_bucket, reserved_bucket
from .tensor import (NonFiniteError, Parameter, ShapeError, Tensor, backward, default_dtype,
                     grad_enabled, no_grad, precision, set_default_dtype)

__all__ = [
    "ops", "Tensor", "Parameter", "ShapeError", "NonFiniteError", "ConfigError",
    "backward", "no_grad", "grad_enabled", "precision", "default_dtype", "set_default_dtype",
    "Module", "ModuleList", "Linear", "LayerNorm", "Embedding", "MLP", "MultiHeadAttention", "multi_head_attention",
    "AdamW", "OptimizerState", "adamw_step", "MissingGradientError",
    "finite_diff_check", "GradCheckReport", "rel_error",
    "relative_position_bucket", "bucket_matrix", "reserved_bucket", "VISUAL_POSITION",
]
