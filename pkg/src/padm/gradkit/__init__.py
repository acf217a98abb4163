"""Minimal reverse-mode autodiff kernel on numpy arrays.

Just enough machinery for the models in this package: a Tensor wrapping a
float32/float64 array, a closed set of differentiable ops, and Adam.  Graphs
are built eagerly; ``backward`` on a scalar walks the graph once in reverse
topological order and accumulates gradients additively.
"""

from padm.gradkit.tensor import (
    Tensor,
    as_tensor,
    constant,
    no_grad,
    set_finite_check,
    fd_grad,
)
from padm.gradkit.ops import (
    add,
    sub,
    mul,
    neg,
    matmul,
    exp,
    reciprocal,
    sqrt,
    absolute,
    relu,
    gelu,
    softplus,
    softmax,
    layer_norm,
    linear,
    conv2d,
    upsample_nearest,
    reduce_sum,
    reduce_mean,
    concat,
    reshape,
    transpose,
)
from padm.gradkit.optim import ParamStore, adam_step

__all__ = [
    "Tensor",
    "as_tensor",
    "constant",
    "no_grad",
    "set_finite_check",
    "fd_grad",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "exp",
    "reciprocal",
    "sqrt",
    "absolute",
    "relu",
    "gelu",
    "softplus",
    "softmax",
    "layer_norm",
    "linear",
    "conv2d",
    "upsample_nearest",
    "reduce_sum",
    "reduce_mean",
    "concat",
    "reshape",
    "transpose",
    "ParamStore",
    "adam_step",
]
