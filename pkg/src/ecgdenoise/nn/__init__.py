from .layers import BatchNormState, batch_norm, bilstm, conv1d, conv1d_transpose, lstm
from .optim import Adam, AdamState, adam_step, mse_loss
from .tensor import (
    Tensor,
    add,
    as_tensor,
    backward,
    build_tape,
    concat,
    leaky_relu,
    mean_all,
    mul,
    reshape,
    set_debug,
    sigmoid,
    slice_,
    sub,
    sum_all,
    tanh,
    tape_json,
)

__all__ = [
    "Adam", "AdamState", "BatchNormState", "Tensor", "adam_step", "add", "as_tensor", "backward",
    "batch_norm", "bilstm", "build_tape", "concat", "conv1d", "conv1d_transpose", "leaky_relu",
    "lstm", "mean_all", "mse_loss", "mul", "reshape", "set_debug", "sigmoid", "slice_", "sub", "sum_all",
    "tanh", "tape_json",
]
