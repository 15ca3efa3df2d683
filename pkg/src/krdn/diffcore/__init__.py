from .checkpoint import load_tensors, save_tensors
from .optim import NonFiniteGradient, ParameterStore, adam_step, xavier_init
from .tape import (
    PRIMITIVES,
    DiffError,
    ShapeError,
    Tape,
    Var,
    add,
    backward,
    cosine,
    div,
    dot,
    exp,
    gather,
    l2_normalize,
    matvec,
    max_with_zero,
    mean,
    mul,
    relu,
    scale_rows,
    scatter_add,
    sigmoid,
    stable_sigmoid,
    sub,
)
from .tape import sum as sum_  # noqa: F401

__all__ = [
    "PRIMITIVES", "DiffError", "ShapeError", "Tape", "Var", "add", "backward",
    "cosine", "div", "dot", "exp", "gather", "l2_normalize", "matvec",
    "max_with_zero", "mean", "mul", "relu", "scale_rows", "scatter_add",
    "sigmoid", "stable_sigmoid", "sub", "sum_", "NonFiniteGradient",
    "ParameterStore", "adam_step", "xavier_init", "load_tensors", "save_tensors",
]
