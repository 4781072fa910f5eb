"""Numerical core: tensors with reverse-mode autodiff, layers, Adam."""
from .checkpoint import (
    CheckpointChecksumError,
    CheckpointError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    load_arrays,
    save_arrays,
)
from .nn import MLP, Embedding, LayerNorm, Linear, Module, Parameter
from .optim import Adam, adam_step, clip_grad_norm
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    attention,
    concat,
    debug_enabled,
    div,
    embedding,
    exp,
    gelu,
    getitem,
    layer_norm,
    linear,
    log,
    matmul,
    mean,
    mse,
    mul,
    no_grad,
    power,
    relu,
    reshape,
    set_debug,
    sigmoid,
    softmax,
    sqrt,
    stack,
    sub,
    tanh,
    transpose,
    tsum,
    where,
)

__all__ = [name for name in dir() if not name.startswith("_")]
