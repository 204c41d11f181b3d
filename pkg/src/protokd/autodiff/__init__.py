"""Minimal reverse-mode automatic differentiation over numpy arrays."""
from .functional import (
    DegenerateInputError,
    conv2d,
    dropout,
    global_avg_pool,
    group_norm,
    l2_normalize,
    linear,
    log_softmax,
    logsumexp,
    pairwise_sq_euclidean,
    softmax,
)
from .gradcheck import analytic_grad, check_gradients, max_rel_error, numerical_grad
from .optim import SGD, Adam, MissingGradError, Optimizer, make_optimizer
from .tensor import (
    GraphError,
    NonFiniteError,
    Tensor,
    add,
    as_tensor,
    concat,
    div,
    exp,
    is_grad_enabled,
    log,
    matmul,
    mul,
    no_grad,
    power,
    relu,
    reshape,
    sqrt,
    sub,
    topological_order,
    transpose,
    tsum,
    tmean,
)

__all__ = [
    "Adam",
    "DegenerateInputError",
    "GraphError",
    "MissingGradError",
    "NonFiniteError",
    "Optimizer",
    "SGD",
    "Tensor",
    "add",
    "analytic_grad",
    "check_gradients",
    "as_tensor",
    "concat",
    "conv2d",
    "div",
    "dropout",
    "exp",
    "global_avg_pool",
    "group_norm",
    "is_grad_enabled",
    "l2_normalize",
    "linear",
    "log",
    "log_softmax",
    "logsumexp",
    "make_optimizer",
    "matmul",
    "max_rel_error",
    "mul",
    "no_grad",
    "numerical_grad",
    "pairwise_sq_euclidean",
    "power",
    "relu",
    "reshape",
    "softmax",
    "sqrt",
    "sub",
    "topological_order",
    "transpose",
    "tmean",
    "tsum",
]
