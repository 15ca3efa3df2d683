"""Tape-based reverse-mode differentiation over dense float64 arrays.

Every primitive appends one record to the tape of its inputs.  ``backward``
walks the records in reverse order, so each record is visited exactly once.
Only scalar-by-tensor broadcasting is allowed; every other binary primitive
requires identical shapes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import sparse

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class DiffError(ArithmeticError):
    pass


@dataclass
class Record:
    primitive: str
    output: int
    inputs: tuple[int, ...]
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


class Var:
    __slots__ = ("tape", "id", "value", "name", "requires_grad")

    def __init__(self, tape: Tape, node_id: int, value: np.ndarray,
                 name: str | None = None, requires_grad: bool = False):
        self.tape = tape
        self.id = node_id
        self.value = value
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Var#{self.id}{label}(shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)


@dataclass
class Tape:
    records: list[Record] = field(default_factory=list)
    nodes: list[Var] = field(default_factory=list)

    def _new(self, value, name=None, requires_grad=False) -> Var:
        var = Var(self, len(self.nodes), value, name, requires_grad)
        self.nodes.append(var)
        return var

    def param(self, name: str, value: np.ndarray) -> Var:
        """Register a differentiable leaf.  The array is copied so that
        later in-place optimizer updates never alias the recorded value."""
        return self._new(np.array(value, dtype=DTYPE), name, True)

    def const(self, value) -> Var:
        return self._new(np.asarray(value, dtype=DTYPE))

    def record(self, primitive: str, value: np.ndarray, inputs: Sequence[Var], vjp) -> Var:
        out = self._new(value, requires_grad=any(v.requires_grad for v in inputs))
        if out.requires_grad:
            self.records.append(Record(primitive, out.id, tuple(v.id for v in inputs), vjp))
        return out

    def params(self) -> dict[str, Var]:
        return {v.name: v for v in self.nodes if v.requires_grad and v.name is not None}


def _tape_of(*args) -> Tape:
    for a in args:
        if isinstance(a, Var):
            return a.tape
    raise TypeError("at least one operand must be a Var")


def _lift(tape: Tape, x) -> Var:
    if isinstance(x, Var):
        if x.tape is not tape:
            raise ValueError("operands belong to different tapes")
        return x
    return tape.const(x)


def _binary_shapes(prim: str, a: Var, b: Var) -> None:
    if a.shape == b.shape or a.value.ndim == 0 or b.value.ndim == 0:
        return
    raise ShapeError(f"{prim}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    # only scalar broadcasting is permitted, so the target must be 0-d
    return np.asarray(g.sum())


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Var:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    _binary_shapes("add", a, b)
    sa, sb = a.shape, b.shape
    return t.record("add", a.value + b.value, (a, b),
                    lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Var:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    _binary_shapes("sub", a, b)
    sa, sb = a.shape, b.shape
    return t.record("sub", a.value - b.value, (a, b),
                    lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Var:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    _binary_shapes("mul", a, b)
    av, bv = a.value, b.value
    return t.record("mul", av * bv, (a, b),
                    lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Var:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    _binary_shapes("div", a, b)
    av, bv = a.value, b.value
    if np.any(bv == 0):
        raise DiffError("div: division by zero")
    out = av / bv
    return t.record("div", out, (a, b),
                    lambda g: (_unbroadcast(g / bv, av.shape),
                               _unbroadcast(-g * out / bv, bv.shape)))


def scale_rows(w, x) -> Var:
    """Multiply row k of a 2-d ``x`` by ``w[k]``."""
    t = _tape_of(w, x)
    w, x = _lift(t, w), _lift(t, x)
    if w.value.ndim != 1 or x.value.ndim != 2 or w.shape[0] != x.shape[0]:
        raise ShapeError(f"scale_rows: incompatible shapes {w.shape} and {x.shape}")
    wv, xv = w.value, x.value
    return t.record("scale_rows", xv * wv[:, None], (w, x),
                    lambda g: ((g * xv).sum(axis=1), g * wv[:, None]))


# ---------------------------------------------------------------- elementwise

def relu(x: Var) -> Var:
    pos = x.value > 0
    return x.tape.record("relu", np.where(pos, x.value, 0.0), (x,), lambda g: (g * pos,))


def max_with_zero(x: Var) -> Var:
    """Ramp ``max(x, 0)`` used by hinge-style losses."""
    pos = x.value > 0
    return x.tape.record("max_with_zero", np.maximum(x.value, 0.0), (x,), lambda g: (g * pos,))


def sigmoid(x: Var) -> Var:
    s = stable_sigmoid(x.value)
    return x.tape.record("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def exp(x: Var) -> Var:
    e = np.exp(x.value)
    return x.tape.record("exp", e, (x,), lambda g: (g * e,))


# ---------------------------------------------------------------- reductions

def sum(x: Var) -> Var:  # noqa: A001 - mirrors the primitive name
    shape = x.shape
    return x.tape.record("sum", np.asarray(x.value.sum()), (x,),
                         lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Var) -> Var:
    shape, n = x.shape, x.value.size
    if n == 0:
        raise DiffError("mean: empty tensor")
    return x.tape.record("mean", np.asarray(x.value.mean()), (x,),
                         lambda g: (np.broadcast_to(g / n, shape).copy(),))


def dot(a: Var, b: Var) -> Var:
    """Inner product; row-wise for 2-d operands (returns one value per row)."""
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    if a.shape != b.shape or a.value.ndim not in (1, 2):
        raise ShapeError(f"dot: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    if av.ndim == 1:
        return t.record("dot", np.asarray(av @ bv), (a, b), lambda g: (g * bv, g * av))
    return t.record("dot", np.einsum("ij,ij->i", av, bv), (a, b),
                    lambda g: (g[:, None] * bv, g[:, None] * av))


def _row_norms(v: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("...j,...j->...", v, v))[..., None]


def l2_normalize(x: Var) -> Var:
    """Scale each row (or a single vector) to unit Euclidean norm.

    Zero rows stay zero and pass no gradient.
    """
    if x.value.ndim not in (1, 2):
        raise ShapeError(f"l2_normalize: expected 1-d or 2-d input, got {x.shape}")
    v = x.value
    norm = _row_norms(v)
    safe = np.where(norm > 0, norm, 1.0)
    y = np.where(norm > 0, v / safe, 0.0)

    def vjp(g):
        proj = np.einsum("...j,...j->...", g, y)[..., None]
        return (np.where(norm > 0, (g - proj * y) / safe, 0.0),)

    return x.tape.record("l2_normalize", y, (x,), vjp)


def cosine(a: Var, b: Var) -> Var:
    """Cosine similarity, row-wise for 2-d operands; zero-norm rows score 0."""
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    if a.shape != b.shape or a.value.ndim not in (1, 2):
        raise ShapeError(f"cosine: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    na, nb = _row_norms(av)[..., 0], _row_norms(bv)[..., 0]
    ok = (na > 0) & (nb > 0)
    na_s, nb_s = np.where(ok, na, 1.0), np.where(ok, nb, 1.0)
    ab = np.einsum("...j,...j->...", av, bv)
    c = np.where(ok, ab / (na_s * nb_s), 0.0)

    def vjp(g):
        g = np.where(ok, g, 0.0)[..., None]
        cc = c[..., None]
        ga = g * (bv / (na_s * nb_s)[..., None] - cc * av / (na_s ** 2)[..., None])
        gb = g * (av / (na_s * nb_s)[..., None] - cc * bv / (nb_s ** 2)[..., None])
        return ga, gb

    return t.record("cosine", c, (a, b), vjp)


def matvec(w: Var, x: Var) -> Var:
    """Apply the matrix ``w`` to a vector, or to every row of a 2-d ``x``."""
    t = _tape_of(w, x)
    w, x = _lift(t, w), _lift(t, x)
    wv, xv = w.value, x.value
    if wv.ndim != 2 or xv.ndim not in (1, 2) or xv.shape[-1] != wv.shape[1]:
        raise ShapeError(f"matvec: incompatible shapes {w.shape} and {x.shape}")
    if xv.ndim == 1:
        return t.record("matvec", wv @ xv, (w, x), lambda g: (np.outer(g, xv), wv.T @ g))
    return t.record("matvec", xv @ wv.T, (w, x), lambda g: (g.T @ xv, g @ wv))


# ---------------------------------------------------------------- indexing

def gather(table: Var, indices) -> Var:
    """Rows ``table[indices]``; the backward pass is a scatter-add, so
    repeated indices accumulate."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather: indices must be 1-d, got shape {idx.shape}")
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather: index out of range for table of {n} rows")
    shape = table.shape
    return table.tape.record("gather", table.value[idx], (table,),
                             lambda g: (_scatter(g, idx, shape),))


def scatter_add(src: Var, indices, size: int) -> Var:
    """Sum rows of ``src`` into ``size`` output rows selected by ``indices``."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1 or idx.shape[0] != src.shape[0]:
        raise ShapeError(f"scatter_add: {idx.shape[0]} indices for {src.shape[0]} rows")
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        raise IndexError(f"scatter_add: index out of range for {size} rows")
    out_shape = (size,) + src.shape[1:]
    return src.tape.record("scatter_add", _scatter(src.value, idx, out_shape), (src,),
                           lambda g: (g[idx],))


def _scatter(values: np.ndarray, idx: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if values.ndim == 1:
        return np.bincount(idx, weights=values, minlength=shape[0]).astype(DTYPE)
    # a 0/1 selection matrix times the rows sums duplicates in index order
    sel = sparse.csr_matrix((np.ones(len(idx)), (idx, np.arange(len(idx)))), shape=(shape[0], len(idx)))
    return np.asarray(sel @ values.reshape(len(idx), -1), dtype=DTYPE).reshape(shape)


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


PRIMITIVES = {
    "gather": gather, "scatter_add": scatter_add, "add": add, "sub": sub,
    "mul": mul, "div": div, "scale_rows": scale_rows, "relu": relu,
    "sigmoid": sigmoid, "exp": exp, "sum": sum, "mean": mean,
    "l2_normalize": l2_normalize, "dot": dot, "cosine": cosine,
    "matvec": matvec, "max_with_zero": max_with_zero,
}


# ---------------------------------------------------------------- backward

def backward(tape: Tape, loss: Var) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` for every named parameter on ``tape``.

    Parameters that do not influence the loss receive zeros.
    """
    if loss.tape is not tape:
        raise ValueError("loss was not recorded on this tape")
    if loss.value.ndim != 0:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.id: np.ones((), dtype=DTYPE)}
    for rec in reversed(tape.records):
        g = grads.pop(rec.output, None)
        if g is None:
            continue
        for node_id, gi in zip(rec.inputs, rec.vjp(g)):
            if gi is None or not tape.nodes[node_id].requires_grad:
                continue
            if node_id in grads:
                grads[node_id] = grads[node_id] + gi
            else:
                grads[node_id] = gi
    out = {}
    for name, var in tape.params().items():
        g = grads.get(var.id)
        out[name] = np.zeros_like(var.value) if g is None else np.asarray(g, dtype=DTYPE).reshape(var.shape)
    return out
