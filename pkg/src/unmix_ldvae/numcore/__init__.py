"""Minimal tensor library: reverse-mode autodiff on numpy, the special
functions the losses need, and reparameterized gamma sampling."""

from .gamma import GammaNoise, draw_gamma_noise, gamma_from_noise, sample_gamma_reparam
from .gradcheck import finite_diff_check
from .ops import (
    PRIMITIVES,
    add,
    as_tensor,
    concat,
    digamma,
    divide,
    exp,
    layer_norm,
    lgamma,
    log,
    matmul,
    max_reduce,
    mean_reduce,
    multiply,
    negate,
    primitive_forward,
    relu,
    reshape,
    slice_,
    softmax,
    softplus,
    sqrt,
    subtract,
    sum_reduce,
    transpose,
    tril_compose,
)
from .tensor import (
    NumericError,
    ShapeError,
    Tape,
    TapeRecord,
    Tensor,
    active_tape,
    backward,
)
from . import special

__all__ = [
    "GammaNoise",
    "NumericError",
    "PRIMITIVES",
    "ShapeError",
    "Tape",
    "TapeRecord",
    "Tensor",
    "active_tape",
    "add",
    "as_tensor",
    "backward",
    "concat",
    "digamma",
    "divide",
    "draw_gamma_noise",
    "exp",
    "finite_diff_check",
    "gamma_from_noise",
    "layer_norm",
    "lgamma",
    "log",
    "matmul",
    "max_reduce",
    "mean_reduce",
    "multiply",
    "negate",
    "primitive_forward",
    "relu",
    "reshape",
    "sample_gamma_reparam",
    "slice_",
    "softmax",
    "softplus",
    "special",
    "sqrt",
    "subtract",
    "sum_reduce",
    "transpose",
    "tril_compose",
]
