"""Reverse-mode automatic differentiation on numpy arrays.

A Tensor wraps an ndarray and records the operation that produced it
together with references to its parents.  backward() walks the resulting
graph once in reverse topological order and accumulates vector-Jacobian
products.  Two global switches control behaviour: the active float dtype
(float32 for training, float64 for verification) and whether new
operations are recorded at all.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np


class NumericsError(RuntimeError):
    """Raised when a computation produces or receives non-finite values."""


class GraphError(RuntimeError):
    """Raised on structural misuse of the tape (detached nodes, non-scalar loss)."""


_DTYPE = np.float32
_GRAD_ENABLED = True


def set_precision(mode: str) -> None:
    """Select the float dtype for newly created tensors: 'f32' or 'f64'."""
    global _DTYPE
    if mode == "f32":
        _DTYPE = np.float32
    elif mode == "f64":
        _DTYPE = np.float64
    else:
        raise ValueError(f"unknown precision mode {mode!r}")


def precision() -> str:
    return "f32" if _DTYPE == np.float32 else "f64"


def active_dtype():
    return _DTYPE


@contextmanager
def using_precision(mode: str):
    old = precision()
    set_precision(mode)
    try:
        yield
    finally:
        set_precision(old)


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextmanager
def no_grad():
    """Disable tape recording inside the block. Results are plain values."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to the shape of an operand that was broadcast."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A node in the autodiff graph.

    data is always a numpy array of the active float dtype.  Leaves
    created with requires_grad=True receive gradients from backward();
    interior nodes carry a list of (parent, vjp) pairs, where vjp maps
    the output gradient to that parent's contribution.
    """

    __slots__ = ("data", "requires_grad", "grad", "_links", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != np.float32 and arr.dtype != np.float64:
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad and _GRAD_ENABLED
        self.grad = None
        self._links = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def check_finite(self, context: str) -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise NumericsError(f"non-finite values in {context}")
        return self

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_coerce(other, self), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_coerce(other, self), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other, self), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return tslice(self, key)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=_DTYPE), requires_grad=True, name=name)


def constant(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=_DTYPE))


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DTYPE))


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape, dtype=_DTYPE))


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _make(data: np.ndarray, links) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED:
        live = [(p, fn) for p, fn in links if p.requires_grad or p._links]
        if live:
            out.requires_grad = True
            out._links = live
    return out


# -- primitive operations ------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    data = a.data + b.data
    return _make(data, [
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(g, b.data.shape)),
    ])


def sub(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    data = a.data - b.data
    return _make(data, [
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(-g, b.data.shape)),
    ])


def mul(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    data = a.data * b.data
    return _make(data, [
        (a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
        (b, lambda g: _unbroadcast(g * a.data, b.data.shape)),
    ])


def div(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    data = a.data / b.data
    return _make(data, [
        (a, lambda g: _unbroadcast(g / b.data, a.data.shape)),
        (b, lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)),
    ])


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise GraphError("matmul expects 2-d operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise GraphError(
            f"matmul shape mismatch {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data
    return _make(data, [
        (a, lambda g: g @ b.data.T),
        (b, lambda g: a.data.T @ g),
    ])


def texp(a: Tensor) -> Tensor:
    data = np.exp(a.data)
    return _make(data, [(a, lambda g: g * data)])


def tlog(a: Tensor) -> Tensor:
    data = np.log(a.data)
    return _make(data, [(a, lambda g: g / a.data)])


def ttanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)
    return _make(data, [(a, lambda g: g * (1.0 - data * data))])


def sigmoid(a: Tensor) -> Tensor:
    # 0.5*(tanh(x/2)+1) is overflow-free at both tails
    data = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return _make(data, [(a, lambda g: g * data * (1.0 - data))])


def softplus(a: Tensor) -> Tensor:
    data = np.logaddexp(np.asarray(0.0, dtype=a.data.dtype), a.data)
    sig = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return _make(data, [(a, lambda g: g * sig)])


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.data.shape).copy()
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.data.shape).copy()

    return _make(np.asarray(data), [(a, vjp)])


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.data.shape[i] for i in axis]))
    else:
        n = a.data.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def broadcast_to(a: Tensor, shape) -> Tensor:
    data = np.broadcast_to(a.data, shape).copy()
    return _make(data, [(a, lambda g: _unbroadcast(g, a.data.shape))])


def tslice(a: Tensor, key) -> Tensor:
    data = a.data[key]

    def vjp(g):
        out = np.zeros_like(a.data)
        out[key] = g
        return out

    return _make(np.asarray(data), [(a, vjp)])


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    links = []
    for i, t in enumerate(tensors):
        def vjp(g, lo=offsets[i], hi=offsets[i + 1]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            return g[tuple(idx)]
        links.append((t, vjp))
    return _make(data, links)


def maximum(a: Tensor, b) -> Tensor:
    """Elementwise max. At ties the gradient is routed to the first operand."""
    b = _coerce(b, a)
    data = np.maximum(a.data, b.data)
    first = a.data >= b.data
    return _make(data, [
        (a, lambda g: _unbroadcast(g * first, a.data.shape)),
        (b, lambda g: _unbroadcast(g * (~first), b.data.shape)),
    ])


def minimum(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    return -maximum(-a, -b)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    return minimum(maximum(a, lo), hi)


def gather(a: Tensor, indices, axis: int = 0) -> Tensor:
    indices = np.asarray(indices, dtype=np.int64)
    data = np.take(a.data, indices, axis=axis)

    def vjp(g):
        out = np.zeros_like(a.data)
        # duplicate indices must accumulate, plain fancy assignment would drop them
        np.add.at(out, tuple([slice(None)] * axis + [indices]), g)
        return out

    return _make(data, [(a, vjp)])


def flip(a: Tensor, axis: int = -1) -> Tensor:
    ax = axis if axis >= 0 else a.data.ndim + axis
    return gather(a, np.arange(a.data.shape[ax])[::-1], axis=ax)


def logsumexp(a: Tensor, axis: int) -> Tensor:
    """Stable log-sum-exp along one axis.

    The max shift is treated as a constant; the resulting gradient is the
    exact softmax weighting, so no precision is lost by detaching it.
    """
    c = np.max(a.data, axis=axis, keepdims=True)
    c = np.where(np.isfinite(c), c, 0.0)
    shifted = texp(a - Tensor(c))
    out = tlog(tsum(shifted, axis=axis)) + Tensor(np.squeeze(c, axis=axis))
    return out


# -- backward ------------------------------------------------------------


def _topo(root: Tensor):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._links:
            for parent, _ in node._links:
                if id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor, leaves=None) -> dict:
    """Accumulate d(loss)/d(leaf) for every reachable leaf.

    Returns a dict keyed by id(tensor). Each leaf's .grad is also set.
    When an explicit leaf list is given, unreachable leaves get exact
    zero gradients in the result.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad and loss._links is None:
        raise GraphError("backward called on a detached tensor (nothing on the tape)")

    grads: dict[int, np.ndarray] = {
        id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None or not node._links:
            if g is not None and node.requires_grad and node._links is None:
                node.grad = g
                grads[id(node)] = g
            continue
        for parent, vjp in node._links:
            pg = vjp(g)
            acc = grads.get(id(parent))
            if acc is None:
                grads[id(parent)] = pg
            else:
                grads[id(parent)] = acc + pg

    result = {}
    if leaves is not None:
        for leaf in leaves:
            g = grads.get(id(leaf))
            if g is None:
                g = np.zeros_like(leaf.data)
            if not np.all(np.isfinite(g)):
                name = leaf.name or f"leaf{id(leaf)}"
                raise NumericsError(f"NaN encountered during backward at {name}")
            leaf.grad = g
            result[id(leaf)] = g
    else:
        for node_id, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericsError("NaN encountered during backward")
            result[node_id] = g
    return result
