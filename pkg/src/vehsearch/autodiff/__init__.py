from . import kernels, nn, tensor
from .checkpoint import CheckpointError
from .gradcheck import grad_check
from .nn import BatchNorm2d, Conv2d, LayerNorm, Linear, Module, Parameter
from .optim import Adam, AdamState, step_lr
from .tensor import (
    EPS,
    Graph,
    Tensor,
    backward,
    binary_cross_entropy,
    clamp_probability,
    concat,
    conv2d,
    cosine_similarity,
    cross_entropy,
    leaky_relu,
    matmul,
    mean,
    mse,
    no_grad,
    relu,
    reshape,
    sigmoid,
    softmax,
    transpose,
)

__all__ = [
    "Adam", "AdamState", "BatchNorm2d", "CheckpointError", "Conv2d", "EPS", "Graph",
    "LayerNorm", "Linear", "Module", "Parameter", "Tensor", "backward", "binary_cross_entropy",
    "clamp_probability", "concat", "conv2d", "cosine_similarity", "cross_entropy", "grad_check",
    "kernels", "leaky_relu", "matmul", "mean", "mse", "nn", "no_grad", "relu", "reshape",
    "sigmoid", "softmax", "step_lr", "tensor", "transpose",
]
