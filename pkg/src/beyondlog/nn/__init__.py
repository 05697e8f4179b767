"""Minimal differentiable compute core (numpy tape autodiff)."""
from . import tensor as F
from .gradcheck import GradCheckReport, NonFiniteLossError, StopGradient, grad_check, value_and_grad
from .layers import (ConfigError, EmptyContextError, ShapeError, attend, feed_forward, layer_norm, linear,
                     linear_forward, mlp, multi_head_attention)
from .optim import OptimConfig, adam_step, lr_schedule
from .params import ParamStore, add_attention, add_layer_norm, add_linear, uniform_init
from .tensor import Tensor, tensor

__all__ = [
    "F", "Tensor", "tensor", "ParamStore", "OptimConfig", "GradCheckReport", "NonFiniteLossError",
    "ShapeError", "ConfigError", "EmptyContextError", "adam_step", "lr_schedule", "grad_check",
    "value_and_grad", "StopGradient", "linear_forward", "linear", "layer_norm", "multi_head_attention", "attend",
    "feed_forward", "mlp", "add_linear", "add_attention", "add_layer_norm", "uniform_init",
]
