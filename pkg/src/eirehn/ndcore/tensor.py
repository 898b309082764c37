"""Dense float64 tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a row-major ``float64`` numpy array.  Tensors created
through :meth:`Tape.leaf` are differentiable leaves; every operation that has
at least one taped operand records a node on that tape.  Operations on
untaped tensors (or raw arrays / Python numbers) produce plain constants, so
the same model code runs both with and without differentiation.

Broadcasting is deliberately narrower than numpy's: two operands are
compatible when their shapes are equal, when one of them is a scalar, or when
one shape is a trailing suffix of the other (``(D,)`` against ``(B, D)``).
Anything else raises :class:`ShapeError`.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from ..errors import ContractError, DomainError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "tanh",
    "sigm",
    "softplus",
    "max0",
    "exp",
    "log",
    "elementwise",
    "matmul",
    "linear",
    "transpose",
    "concat",
    "reshape",
    "take",
    "tsum",
    "mean",
    "logsumexp",
]


class Tensor:
    """Immutable dense array, optionally attached to a :class:`Tape`."""

    __slots__ = ("value", "tape", "slot", "name")
    __array_priority__ = 100.0

    def __init__(self, value, tape=None, slot=-1, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.slot = slot
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def data(self):
        """Values flattened in row-major order."""
        return self.value.ravel()

    @property
    def T(self):
        return transpose(self)

    def item(self):
        if self.value.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.value.reshape(-1)[0])

    def numpy(self):
        return self.value.copy()

    def __repr__(self):
        flag = ", taped" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.value.shape[0]

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return _getitem(self, idx)


class Tape:
    """Record of primitive operations for one backward pass.

    Nodes are stored in execution order as ``(out_slot, parents, vjp)``.  The
    tape is single-use: :meth:`backward` may be called once.
    """

    def __init__(self):
        self._nodes = []
        self._nslots = 0
        self._leaves = {}
        self._consumed = False

    def __len__(self):
        return len(self._nodes)

    def _slot(self):
        s = self._nslots
        self._nslots += 1
        return s

    def leaf(self, value, name=None):
        """Register a differentiable leaf parameter."""
        if self._consumed:
            raise ContractError("tape already consumed by backward()")
        key = name if name is not None else f"_leaf{len(self._leaves)}"
        if key in self._leaves:
            raise ContractError(f"duplicate leaf name {key!r}")
        t = Tensor(np.array(value, dtype=np.float64), self, self._slot(), key)
        self._leaves[key] = t
        return t

    def leaves(self):
        return dict(self._leaves)

    def _record(self, value, parents, vjp):
        out = Tensor(value, self, self._slot())
        self._nodes.append((out.slot, parents, vjp))
        return out

    def backward(self, loss):
        """Return ``{leaf name: d loss / d leaf}`` for every leaf on the tape.

        Leaves without a path to ``loss`` get zero gradients.
        """
        if self._consumed:
            raise ContractError("tape is single-use; backward() already ran")
        if not isinstance(loss, Tensor) or loss.tape is not self:
            raise ContractError("loss was not recorded on this tape")
        if loss.value.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.shape}")
        self._consumed = True
        grads = [None] * self._nslots
        grads[loss.slot] = np.ones_like(loss.value)
        for out_slot, parents, vjp in reversed(self._nodes):
            g = grads[out_slot]
            if g is None:
                continue
            contribs = vjp(g)
            for p, c in zip(parents, contribs):
                if p.tape is None or c is None:
                    continue
                acc = grads[p.slot]
                grads[p.slot] = c if acc is None else acc + c
            grads[out_slot] = None
        result = {}
        for key, leaf in self._leaves.items():
            g = grads[leaf.slot]
            result[key] = np.zeros_like(leaf.value) if g is None else np.asarray(g).reshape(leaf.shape)
        return result


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(value, parents, vjp):
    tape = None
    for p in parents:
        if p.tape is not None:
            if tape is None:
                tape = p.tape
            elif p.tape is not tape:
                raise ContractError("operands belong to different tapes")
    if tape is None:
        return Tensor(value)
    if tape._consumed:
        raise ContractError("cannot record on a consumed tape")
    return tape._record(value, parents, vjp)


# -- broadcasting -----------------------------------------------------------


def _broadcast_shape(sa, sb, opname):
    if sa == sb:
        return sa
    if sa == ():
        return sb
    if sb == ():
        return sa
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return sb
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return sa
    raise ShapeError(f"{opname}: shapes {sa} and {sb} are not broadcast-compatible")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    return g.reshape(shape)


def _binary(a, b, opname):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, opname)
    return a, b


# -- elementwise ------------------------------------------------------------


def add(a, b):
    a, b = _binary(a, b, "add")
    sa, sb = a.shape, b.shape
    return _emit(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = _binary(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _emit(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = _binary(a, b, "mul")
    av, bv = a.value, b.value
    return _emit(av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b):
    a, b = _binary(a, b, "div")
    av, bv = a.value, b.value
    if np.any(bv == 0):
        raise DomainError("div: division by zero")
    out = av / bv
    return _emit(out, (a, b), lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)))


def neg(a):
    a = as_tensor(a)
    return _emit(-a.value, (a,), lambda g: (-g,))


def tanh(a):
    a = as_tensor(a)
    y = np.tanh(a.value)
    return _emit(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigm(a):
    a = as_tensor(a)
    y = expit(a.value)
    return _emit(y, (a,), lambda g: (g * y * (1.0 - y),))


def softplus(a):
    a = as_tensor(a)
    v = a.value
    return _emit(np.logaddexp(0.0, v), (a,), lambda g: (g * expit(v),))


def max0(a):
    """Exact rectifier; the subgradient at 0 is 0."""
    a = as_tensor(a)
    mask = a.value > 0.0
    return _emit(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def exp(a):
    a = as_tensor(a)
    y = np.exp(a.value)
    return _emit(y, (a,), lambda g: (g * y,))


def log(a):
    a = as_tensor(a)
    v = a.value
    if np.any(v <= 0.0):
        raise DomainError("log: non-positive argument")
    return _emit(np.log(v), (a,), lambda g: (g / v,))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "tanh": tanh,
    "sigm": sigm,
    "softplus": softplus,
    "max0": max0,
    "exp": exp,
    "log": log,
}


def elementwise(op, *operands):
    """Dispatch an elementwise primitive by name."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*operands)


# -- linear algebra -----------------------------------------------------------


def matmul(a, b):
    """Matrix product for 1-D/2-D operands (numpy ``@`` semantics)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    a2 = av if av.ndim == 2 else av[None, :]
    b2 = bv if bv.ndim == 2 else bv[:, None]
    out = av @ bv

    def vjp(g):
        g2 = np.asarray(g).reshape(a2.shape[0], b2.shape[1])
        return (g2 @ b2.T).reshape(av.shape), (a2.T @ g2).reshape(bv.shape)

    return _emit(out, (a, b), vjp)


def linear(x, w):
    """``x @ w.T`` for ``x`` of shape ``(k,)`` or ``(B, k)`` and ``w`` of shape ``(n, k)``.

    This is ``W [h; x; 1]`` applied row-wise to a batch.
    """
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.ndim not in (1, 2) or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input shape {x.shape} does not match weight shape {w.shape}")
    xv, wv = x.value, w.value

    def vjp(g):
        if xv.ndim == 1:
            return g @ wv, np.outer(g, xv)
        return g @ wv, g.T @ xv

    return _emit(xv @ wv.T, (x, w), vjp)


def transpose(a):
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D tensor, got shape {a.shape}")
    return _emit(a.value.T, (a,), lambda g: (g.T,))


# -- structural ---------------------------------------------------------------


def concat(tensors, axis=-1):
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no operands")
    nd = ts[0].ndim
    if nd == 0 or any(t.ndim != nd for t in ts):
        raise ShapeError(f"concat: rank mismatch {[t.shape for t in ts]}")
    ax = axis % nd
    for t in ts[1:]:
        if t.shape[:ax] + t.shape[ax + 1:] != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise ShapeError(f"concat: shapes {[t.shape for t in ts]} disagree off axis {axis}")
    sizes = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _emit(np.concatenate([t.value for t in ts], axis=ax), tuple(ts),
                 lambda g: tuple(np.split(g, sizes, axis=ax)))


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {old} to {shape}") from exc
    return _emit(out, (a,), lambda g: (g.reshape(old),))


def _getitem(a, idx):
    shape = a.shape
    try:
        out = a.value[idx]
    except IndexError as exc:
        raise ShapeError(f"index {idx!r} invalid for shape {shape}") from exc

    basic = _is_basic_index(idx)

    def vjp(g):
        full = np.zeros(shape)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _emit(out, (a,), vjp)


def _is_basic_index(idx):
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis for p in parts)


def take(a, indices, axis=0):
    """Gather slices of ``a`` along ``axis``; repeated indices accumulate gradient."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    n = a.shape[axis]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError(f"take: index out of range for axis of size {n}")
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0) if g.ndim else g)
        return (full,)

    return _emit(np.take(a.value, idx, axis=axis), (a,), vjp)


# -- reductions ---------------------------------------------------------------


def tsum(a, axis=None):
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _emit(a.value.sum(axis=axis), (a,), vjp)


def mean(a, axis=None):
    a = as_tensor(a)
    n = a.value.size if axis is None else a.shape[axis]
    return tsum(a, axis) * (1.0 / n)


def logsumexp(a, axis=-1):
    """Max-shifted log-sum-exp over ``axis``."""
    a = as_tensor(a)
    v = a.value
    m = v.max(axis=axis, keepdims=True)
    e = np.exp(v - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=axis)
    soft = e / s
    return _emit(out, (a,), lambda g: (np.expand_dims(g, axis) * soft,))
