"""Minimal dense tensor engine with reverse-mode differentiation."""
from .checkpoint import CheckpointError, load_archive, save_archive
from .gradcheck import check_gradients, numeric_grad, relative_error
from .losses import bce_loss, log_transform, log_tsdf_l1, total_loss
from .module import HEAD_INIT_SCALE, LayerNormAffine, Linear, Module, glorot_uniform
from .optim import Adam, adam_step, warmup_lr
from .tensor import (
    Parameter,
    ShapeError,
    Tape,
    Tensor,
    add,
    as_tensor,
    clamp,
    concat,
    exp,
    gather_rows,
    getitem,
    layer_norm,
    log,
    matmul,
    mean,
    mul,
    neg,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax,
    tabs,
    tanh,
    transpose,
    tsum,
)

__all__ = [
    "HEAD_INIT_SCALE", "Adam", "CheckpointError", "LayerNormAffine", "Linear", "Module", "Parameter",
    "ShapeError", "Tape", "Tensor", "adam_step", "add", "as_tensor", "bce_loss",
    "check_gradients", "clamp", "concat", "exp", "gather_rows", "getitem",
    "glorot_uniform", "layer_norm", "load_archive", "log", "log_transform",
    "log_tsdf_l1", "matmul", "mean", "mul", "neg", "numeric_grad", "relative_error",
    "relu", "reshape", "save_archive", "scale", "sigmoid", "softmax", "tabs", "tanh",
    "total_loss", "transpose", "tsum", "warmup_lr",
]
