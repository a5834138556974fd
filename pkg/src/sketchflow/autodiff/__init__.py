from . import checkpoint
from .gradcheck import gradient_check
from .optim import Adam, adam_step
from .tensor import (
    ShapeError,
    Tensor,
    abs_,
    add,
    as_tensor,
    backward,
    broadcast_to,
    concat,
    div,
    dropout,
    exp,
    linear,
    log,
    logsumexp,
    matmul,
    max_,
    mean,
    mul,
    neg,
    no_grad,
    relu,
    reshape,
    set_debug,
    segment_max,
    slice_,
    sqrt,
    square,
    sub,
    sum_,
    take,
    tanh,
    weight_norm_linear,
)

__all__ = [
    "Adam",
    "ShapeError",
    "Tensor",
    "abs_",
    "adam_step",
    "add",
    "as_tensor",
    "backward",
    "broadcast_to",
    "checkpoint",
    "concat",
    "div",
    "dropout",
    "exp",
    "gradient_check",
    "linear",
    "log",
    "logsumexp",
    "matmul",
    "max_",
    "mean",
    "mul",
    "neg",
    "no_grad",
    "relu",
    "reshape",
    "set_debug",
    "segment_max",
    "slice_",
    "sqrt",
    "square",
    "sub",
    "sum_",
    "take",
    "tanh",
    "weight_norm_linear",
]
