"""Numerical substrate: tensors, reverse-mode tape, RNG and gradient checks."""

from .gradcheck import grad_check, tape_gradients
from .rng import Rng, derive_seed
from .tensor import (
    Tape,
    Tensor,
    add,
    as_tensor,
    concat,
    div,
    elementwise,
    exp,
    linear,
    log,
    logsumexp,
    matmul,
    max0,
    mean,
    mul,
    neg,
    reshape,
    sigm,
    softplus,
    sub,
    take,
    tanh,
    transpose,
    tsum,
)


def backward(tape, loss):
    """Gradient map ``{leaf name: array}`` of scalar ``loss`` over the tape's leaves."""
    return tape.backward(loss)


__all__ = [
    "Rng",
    "Tape",
    "Tensor",
    "add",
    "as_tensor",
    "backward",
    "concat",
    "derive_seed",
    "div",
    "elementwise",
    "exp",
    "grad_check",
    "linear",
    "log",
    "logsumexp",
    "matmul",
    "max0",
    "mean",
    "mul",
    "neg",
    "reshape",
    "sigm",
    "softplus",
    "sub",
    "take",
    "tanh",
    "tape_gradients",
    "transpose",
    "tsum",
]
