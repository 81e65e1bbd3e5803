"""Minimal dense-tensor engine with reverse-mode differentiation."""

from .errors import DegenerateInputError, GraphError, ShapeError, UninitializedStatsError
from .gradcheck import GradcheckResult, check_gradients, numeric_grad, relative_error
from .nn import BN_EPS, RunningStats, batch_norm, conv2d, lstm_cell, maxpool2
from .ops import (
    add,
    concat,
    dot,
    exp,
    getitem,
    l2_normalize,
    log_softmax,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    sigmoid,
    softmax,
    stack,
    sub,
    sum,
    tanh,
    transpose,
)
from .tensor import (
    Tape,
    Tensor,
    active_tape,
    as_tensor,
    backward,
    default_dtype,
    get_default_dtype,
    no_record,
    set_default_dtype,
)

__all__ = [
    "BN_EPS",
    "DegenerateInputError",
    "GradcheckResult",
    "GraphError",
    "RunningStats",
    "ShapeError",
    "Tape",
    "Tensor",
    "UninitializedStatsError",
    "active_tape",
    "add",
    "as_tensor",
    "backward",
    "batch_norm",
    "check_gradients",
    "concat",
    "conv2d",
    "default_dtype",
    "dot",
    "exp",
    "get_default_dtype",
    "getitem",
    "l2_normalize",
    "log_softmax",
    "lstm_cell",
    "matmul",
    "maxpool2",
    "mean",
    "mul",
    "no_record",
    "numeric_grad",
    "relative_error",
    "relu",
    "reshape",
    "set_default_dtype",
    "sigmoid",
    "softmax",
    "stack",
    "sub",
    "sum",
    "tanh",
    "transpose",
]
