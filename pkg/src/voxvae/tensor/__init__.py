"""Differentiable kernels for the volumetric VAE and the LSTM head."""
from .autograd import (
    Parameter,
    Tensor,
    backward,
    bce_with_logits,
    concat,
    conv3d,
    conv_transpose3d_1x1,
    dropout,
    elu,
    exp,
    matmul,
    sigmoid,
    stack,
    tanh,
    trilinear_resize,
    weight_normalize,
)
from .config import no_grad, set_default_dtype, set_deterministic
from .optim import AdamState, adam_step, zero_grad

__all__ = [
    "AdamState",
    "Parameter",
    "Tensor",
    "adam_step",
    "backward",
    "bce_with_logits",
    "concat",
    "conv3d",
    "conv_transpose3d_1x1",
    "dropout",
    "elu",
    "exp",
    "matmul",
    "no_grad",
    "set_default_dtype",
    "set_deterministic",
    "sigmoid",
    "stack",
    "tanh",
    "trilinear_resize",
    "weight_normalize",
    "zero_grad",
]
