"""Minimal float64 tensor engine with reverse-mode automatic differentiation."""
from . import nn, ops
from .nn import (channel_bias, conv3d, embed_kernel, instance_norm, linear_resize_matrix, mish,
                 replicate_pad, trilinear_resize, upsample2)
from .ops import (abs, add, clamp_min, concat, div, exp, expand, log, log_softmax, matmul, max,
                  maximum, mean, min, minimum, mul, neg, pow, reshape, slice, softmax, softplus,
                  sqrt, stack, sub, sum, take, tanh, transpose, where)
from .tensor import Tensor, as_tensor, current_scope, is_grad_enabled, no_grad, parameter, record, scope
from .gradcheck import gradcheck, numerical_grad

__all__ = [name for name in dir() if not name.startswith("_")]
