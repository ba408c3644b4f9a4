"""Dense float64 tensors with a define-by-run reverse-mode tape.

A :class:`Tape` records every primitive applied to tape-attached tensors in
creation order, so a single reverse sweep over the record visits each node
once.  Tensors that are not attached to a tape behave as immutable constants.

Binary elementwise operations require equal shapes, except that a scalar
(shape ``()``) may be combined with a tensor of any shape.  Domain violations
raise :class:`DomainError` instead of producing NaN or Inf.
"""

from __future__ import annotations

import threading
from typing import Iterable, Sequence

import numpy as np
from scipy import special

__all__ = [
    "DomainError",
    "ShapeError",
    "TapeError",
    "Tape",
    "Tensor",
    "as_tensor",
    "backward",
    "detach",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sigmoid",
    "log_sigmoid",
    "tanh",
    "softplus",
    "softplus_inv",
    "square",
    "sqrt",
    "tan",
    "lgamma",
    "matmul",
    "linear",
    "tsum",
    "mean",
    "logsumexp",
    "softmax",
    "simplex",
    "concat",
    "stack",
    "repeat_rows",
    "take_last",
    "where",
    "one_hot",
    "reshape",
    "get",
    "power",
    "transpose",
    "sum_all",
]


class DomainError(ValueError):
    """An operation was applied outside its mathematical domain."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Misuse of the differentiation tape."""


_local = threading.local()


def active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Append-only record of primitive operations for one gradient sample."""

    __slots__ = ("nodes", "leaves")

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []
        self.leaves: list[Tensor] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def leaf(self, data, name: str | None = None) -> "Tensor":
        """Create a leaf tensor whose gradient :func:`backward` reports."""
        t = Tensor(data, name=name)
        t.tape = self
        t.index = len(self.nodes)
        self.nodes.append(t)
        self.leaves.append(t)
        return t

    def clear(self) -> None:
        for node in self.nodes:
            node.tape = None
            node.parents = ()
            node.backward_fn = None
        self.nodes = []
        self.leaves = []

    def __len__(self) -> int:
        return len(self.nodes)


class Tensor:
    """A dense array of 64-bit reals, optionally attached to a tape."""

    __slots__ = ("data", "tape", "index", "parents", "backward_fn", "name", "logits")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, data, name: str | None = None) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.tape: Tape | None = None
        self.index = -1
        self.parents: tuple = ()
        self.backward_fn = None
        self.name = name
        # pre-activation of a sigmoid output, used for stable Bernoulli scoring
        self.logits: Tensor | None = None

    # -- metadata ---------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def attached(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __float__(self) -> float:
        return float(self.data)

    def __bool__(self) -> bool:
        return bool(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = ", attached" if self.tape is not None else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{tag})"

    # -- operators --------------------------------------------------------
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

    def __pow__(self, k):
        if k == 2:
            return square(self)
        return power(self, k)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return get(self, key)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, inputs: tuple, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.logits = None
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif t.tape is not tape:
                raise TapeError("operands are attached to different tapes")
    out.tape = tape
    if tape is None:
        out.index = -1
        out.parents = ()
        out.backward_fn = None
        return out
    out.index = len(tape.nodes)
    out.parents = inputs
    out.backward_fn = backward_fn
    tape.nodes.append(out)
    return out


def backward(loss: Tensor) -> dict:
    """Reverse sweep from a scalar loss; returns ``{leaf: gradient}``.

    Leaves that the loss does not depend on receive zero gradients.  The tape
    is cleared afterwards, detaching every tensor recorded on it.
    """
    if not isinstance(loss, Tensor):
        raise TapeError("loss must be a Tensor")
    if loss.data.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    tape = loss.tape
    if tape is None:
        raise TapeError("loss is not attached to a tape")
    nodes = tape.nodes
    adj: list = [None] * len(nodes)
    adj[loss.index] = np.ones(())
    for i in range(loss.index, -1, -1):
        g = adj[i]
        if g is None:
            continue
        node = nodes[i]
        fn = node.backward_fn
        if fn is None:
            continue
        parents = node.parents
        needs = tuple(p.tape is tape for p in parents)
        grads = fn(g, needs)
        for p, pg, nd in zip(parents, grads, needs):
            if nd and pg is not None:
                j = p.index
                prev = adj[j]
                adj[j] = pg if prev is None else prev + pg
    out = {}
    for leaf in tape.leaves:
        g = adj[leaf.index]
        out[leaf] = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=np.float64).reshape(leaf.data.shape)
    tape.clear()
    return out


def detach(x) -> Tensor:
    """Stop-gradient: same values, no adjoint flows back."""
    x = as_tensor(x)
    return Tensor(x.data)


# -- elementwise ------------------------------------------------------------

def _binary(a, b):
    a = as_tensor(a)
    b = as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    if sa != sb and sa != () and sb != ():
        raise ShapeError(f"shape mismatch {sa} vs {sb}")
    return a, b


def _unb(g, shape):
    if g.shape == shape:
        return g
    return np.sum(g)


def add(a, b) -> Tensor:
    a, b = _binary(a, b)
    sa, sb = a.data.shape, b.data.shape
    return _result(a.data + b.data, (a, b), lambda g, n: (_unb(g, sa), _unb(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _binary(a, b)
    sa, sb = a.data.shape, b.data.shape
    return _result(a.data - b.data, (a, b), lambda g, n: (_unb(g, sa), _unb(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _binary(a, b)
    ad, bd = a.data, b.data

    def bw(g, n):
        return (_unb(g * bd, ad.shape) if n[0] else None, _unb(g * ad, bd.shape) if n[1] else None)

    return _result(ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _binary(a, b)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise DomainError("division by zero")
    out = ad / bd

    def bw(g, n):
        ga = _unb(g / bd, ad.shape) if n[0] else None
        gb = _unb(-g * out / bd, bd.shape) if n[1] else None
        return ga, gb

    return _result(out, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g, n: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    if not np.all(np.isfinite(out)):
        raise DomainError("exp overflow")
    return _result(out, (a,), lambda g, n: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    d = a.data
    if np.any(d <= 0):
        raise DomainError("log of nonpositive value")
    return _result(np.log(d), (a,), lambda g, n: (g / d,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = special.expit(a.data)
    res = _result(out, (a,), lambda g, n: (g * out * (1.0 - out),))
    res.logits = a
    return res


def _softplus_np(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus(a) -> Tensor:
    """log(1 + exp(x)) in the form max(x, 0) + log1p(exp(-|x|))."""
    a = as_tensor(a)
    d = a.data
    return _result(_softplus_np(d), (a,), lambda g, n: (g * special.expit(d),))


def log_sigmoid(a) -> Tensor:
    a = as_tensor(a)
    d = a.data
    return _result(-_softplus_np(-d), (a,), lambda g, n: (g * special.expit(-d),))


def softplus_inv(a) -> Tensor:
    """Inverse of softplus, log(exp(x) - 1), for x > 0."""
    a = as_tensor(a)
    d = a.data
    if np.any(d <= 0):
        raise DomainError("inverse softplus of nonpositive value")
    out = d + np.log(-np.expm1(-d))
    return _result(out, (a,), lambda g, n: (g / -np.expm1(-d),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g, n: (g * (1.0 - out * out),))


def square(a) -> Tensor:
    a = as_tensor(a)
    d = a.data
    return _result(d * d, (a,), lambda g, n: (2.0 * g * d,))


def power(a, k: float) -> Tensor:
    a = as_tensor(a)
    d = a.data
    if k < 0 and np.any(d == 0):
        raise DomainError("negative power of zero")
    if not float(k).is_integer() and np.any(d < 0):
        raise DomainError("fractional power of negative value")
    return _result(d ** k, (a,), lambda g, n: (g * k * d ** (k - 1),))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    d = a.data
    if np.any(d < 0):
        raise DomainError("sqrt of negative value")
    out = np.sqrt(d)

    def bw(g, n):
        if np.any(out == 0):
            raise DomainError("sqrt derivative at zero")
        return (g * 0.5 / out,)

    return _result(out, (a,), bw)


def tan(a) -> Tensor:
    a = as_tensor(a)
    out = np.tan(a.data)
    return _result(out, (a,), lambda g, n: (g * (1.0 + out * out),))


def lgamma(a) -> Tensor:
    """log Gamma(x) for x > 0."""
    a = as_tensor(a)
    d = a.data
    if np.any(d <= 0):
        raise DomainError("lgamma of nonpositive value")
    return _result(special.gammaln(d), (a,), lambda g, n: (g * special.digamma(d),))


def where(cond, a, b) -> Tensor:
    """Elementwise select; ``cond`` is a constant boolean array."""
    a, b = _binary(a, b)
    c = np.asarray(cond, dtype=bool)
    out = np.where(c, a.data, b.data)
    if out.shape != c.shape and c.shape != ():
        raise ShapeError("condition shape mismatch")
    sa, sb = a.data.shape, b.data.shape

    def bw(g, n):
        ga = _unb(np.where(c, g, 0.0), sa) if n[0] else None
        gb = _unb(np.where(c, 0.0, g), sb) if n[1] else None
        return ga, gb

    return _result(out, (a, b), bw)


# -- linear algebra -------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product for 1-D and 2-D operands with the usual numpy rules."""
    a = as_tensor(a)
    b = as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim not in (1, 2) or bd.ndim not in (1, 2):
        raise ShapeError("matmul needs 1-D or 2-D operands")
    if ad.shape[-1] != bd.shape[0]:
        raise ShapeError(f"inner dimensions differ: {ad.shape} @ {bd.shape}")
    out = ad @ bd

    def bw(g, n):
        ga = gb = None
        if n[0]:
            if bd.ndim == 2:
                ga = g @ bd.T
            else:
                ga = np.outer(g, bd) if ad.ndim == 2 else g * bd
        if n[1]:
            if ad.ndim == 2:
                gb = ad.T @ g
            else:
                gb = np.outer(ad, g) if bd.ndim == 2 else g * ad
        return ga, gb

    return _result(out, (a, b), bw)


def linear(x, W, b=None) -> Tensor:
    """Affine map ``W x + b``; a 2-D ``x`` holds one input per row."""
    x = as_tensor(x)
    W = as_tensor(W)
    xd, Wd = x.data, W.data
    if Wd.ndim != 2 or xd.ndim not in (1, 2) or xd.shape[-1] != Wd.shape[1]:
        raise ShapeError(f"linear: input {xd.shape} does not match weights {Wd.shape}")
    out = xd @ Wd.T
    inputs = (x, W)
    if b is not None:
        b = as_tensor(b)
        if b.data.shape != (Wd.shape[0],):
            raise ShapeError(f"linear: bias shape {b.data.shape}")
        out = out + b.data
        inputs = (x, W, b)
    batched = xd.ndim == 2

    def bw(g, n):
        gx = (g @ Wd) if n[0] else None
        gW = ((g.T @ xd) if batched else np.outer(g, xd)) if n[1] else None
        if len(n) == 2:
            return gx, gW
        gb = (g.sum(axis=0) if batched else g) if n[2] else None
        return gx, gW, gb

    return _result(out, inputs, bw)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _result(a.data.T, (a,), lambda g, n: (g.T,))


# -- reductions ------------------------------------------------------------

def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    shape = a.data.shape
    if axis is None:
        return _result(np.asarray(np.sum(a.data)), (a,), lambda g, n: (np.broadcast_to(g, shape),))
    out = np.sum(a.data, axis=axis)
    return _result(out, (a,), lambda g, n: (np.broadcast_to(np.expand_dims(g, axis), shape),))


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return tsum(a, axis) * (1.0 / count)


def logsumexp(a, axis=None) -> Tensor:
    """Max-shifted log-sum-exp over all entries or along ``axis``."""
    a = as_tensor(a)
    d = a.data
    if d.size == 0:
        raise ShapeError("logsumexp of empty input")
    if axis is None:
        m = np.max(d)
        e = np.exp(d - m)
        s = e.sum()
        out = m + np.log(s)
        return _result(np.asarray(out), (a,), lambda g, n: (g * e / s,))
    m = np.max(d, axis=axis, keepdims=True)
    e = np.exp(d - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (m + np.log(s)).squeeze(axis)
    w = e / s
    return _result(out, (a,), lambda g, n: (np.expand_dims(g, axis) * w,))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    d = a.data
    e = np.exp(d - np.max(d, axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g, n):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _result(out, (a,), bw)


def simplex(z) -> Tensor:
    """Map R^(n-1) onto the n-simplex: softmax of ``z`` with a 0 logit appended.

    Operates along the last axis, so a 2-D input maps each row.
    """
    z = as_tensor(z)
    d = z.data
    if d.ndim == 0:
        raise ShapeError("simplex needs a vector input")
    full = np.concatenate([d, np.zeros(d.shape[:-1] + (1,))], axis=-1)
    e = np.exp(full - np.max(full, axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g, n):
        gf = out * (g - np.sum(g * out, axis=-1, keepdims=True))
        return (gf[..., :-1],)

    return _result(out, (z,), bw)


# -- structural ------------------------------------------------------------

def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat of nothing")
    datas = [t.data for t in ts]
    if any(d.ndim == 0 for d in datas):
        raise ShapeError("concat needs at least 1-D operands")
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError as e:
        raise ShapeError(str(e)) from None
    sizes = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def bw(g, n):
        return tuple(np.split(g, sizes, axis=axis))

    return _result(out, ts, bw)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("stack of nothing")
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise ShapeError(str(e)) from None

    def bw(g, n):
        return tuple(np.take(g, i, axis=axis) if n[i] else None for i in range(len(ts)))

    return _result(out, ts, bw)


def get(a, key) -> Tensor:
    """Indexing and slicing with numpy semantics; repeated indices accumulate."""
    a = as_tensor(a)
    if isinstance(key, Tensor):
        raise TypeError("index with integers or arrays, not Tensors")
    d = a.data
    out = d[key]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)
    shape = d.shape

    def bw(g, n):
        z = np.zeros(shape)
        np.add.at(z, key, g)
        return (z,)

    res = _result(out, (a,), bw)
    if a.logits is not None:
        res.logits = get(a.logits, key)
    return res


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.data.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(str(e)) from None
    return _result(out, (a,), lambda g, n: (g.reshape(old),))


def repeat_rows(a, count: int) -> Tensor:
    """Stack ``count`` copies of ``a`` along a new leading axis."""
    a = as_tensor(a)
    out = np.broadcast_to(a.data, (count,) + a.data.shape)
    return _result(out, (a,), lambda g, n: (g.sum(axis=0),))


def take_last(a, idx) -> Tensor:
    """Pick ``a[..., idx]`` per leading position: ``out[r] = a[r, idx[r]]``."""
    a = as_tensor(a)
    d = a.data
    idx = np.asarray(idx, dtype=np.intp)
    if idx.shape != d.shape[:-1]:
        raise ShapeError(f"index shape {idx.shape} does not match {d.shape[:-1]}")
    out = np.take_along_axis(d, idx[..., None], axis=-1)[..., 0]

    def bw(g, n):
        z = np.zeros(d.shape)
        np.put_along_axis(z, idx[..., None], np.asarray(g)[..., None], axis=-1)
        return (z,)

    return _result(out, (a,), bw)


def one_hot(index: int, size: int) -> Tensor:
    if not 0 <= index < size:
        raise ShapeError(f"one-hot index {index} outside [0, {size})")
    v = np.zeros(size)
    v[index] = 1.0
    return Tensor(v)


def sum_all(terms: Iterable) -> Tensor:
    """Sum of a collection of tensors or floats in one tape node."""
    ts = tuple(as_tensor(t) for t in terms)
    if not ts:
        return Tensor(0.0)
    for t in ts:
        if t.data.shape != ():
            raise ShapeError("sum_all takes scalars")
    out = np.asarray(sum(float(t.data) for t in ts))
    return _result(out, ts, lambda g, n: tuple(g if need else None for need in n))
