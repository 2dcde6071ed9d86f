"""Minimal float64 tensor library with reverse-mode and gradient-of-gradient support."""
from .tensor import (
    NonFiniteError,
    SecondOrderError,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    exp,
    grad,
    leaky_relu,
    log,
    matmul,
    mul,
    no_grad,
    power,
    relu,
    reshape,
    scale,
    sigmoid,
    softplus,
    spmm,
    sqnorm,
    sqrt,
    take_rows,
    tanh,
    tsum,
)
from .nn import MlpSpec, init_params, mlp_forward
from .optim import Adam
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint

__all__ = [
    "Adam", "CheckpointError", "MlpSpec", "NonFiniteError", "SecondOrderError", "Tensor",
    "add", "as_tensor", "backward", "concat", "exp", "grad", "init_params", "leaky_relu",
    "load_checkpoint", "log", "matmul", "mlp_forward", "mul", "no_grad", "power", "relu",
    "reshape", "save_checkpoint", "scale", "sigmoid", "softplus", "spmm", "sqnorm", "sqrt",
    "take_rows", "tanh", "tsum",
]
