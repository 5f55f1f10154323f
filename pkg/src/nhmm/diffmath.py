"""Reverse-mode differentiation over dense float64 arrays.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure propagating the upstream gradient.  The tape is rebuilt on every
forward pass, so batch shapes may change freely between calls.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ShapeError

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording in the current thread."""
    previous = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{label})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _node(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn) -> Tensor:
    out = Tensor(data)
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# elementwise binary ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), "add", bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _node(a.data - b.data, (a, b), "sub", bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), "mul", bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * out / b.data, b.shape))

    return _node(out, (a, b), "div", bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), "neg", lambda g: _accumulate(a, -g))


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes (leading axes broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError("matmul", a.shape, b.shape)
    vector_rhs = b.ndim == 1
    bm = b.data[:, None] if vector_rhs else b.data
    out = a.data @ bm

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ np.swapaxes(bm, -1, -2), a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            gb = _unbroadcast(gb, bm.shape)
            _accumulate(b, gb[:, 0] if vector_rhs else gb)

    return _node(out[..., 0] if vector_rhs else out, (a, b), "matmul",
                 (lambda g: bw(g[..., None])) if vector_rhs else bw)


# elementwise unary ops


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), "exp", lambda g: _accumulate(a, g * out))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), "log", lambda g: _accumulate(a, g / a.data))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.data * a.data, (a,), "square", lambda g: _accumulate(a, 2.0 * g * a.data))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), "tanh", lambda g: _accumulate(a, g * (1.0 - out * out)))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), "relu", lambda g: _accumulate(a, g * mask))


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def softplus_np(x: np.ndarray) -> np.ndarray:
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = sigmoid_np(a.data)
    return _node(out, (a,), "sigmoid", lambda g: _accumulate(a, g * out * (1.0 - out)))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return _node(softplus_np(a.data), (a,), "softplus",
                 lambda g: _accumulate(a, g * sigmoid_np(a.data)))


def clamp_min(a, floor: float) -> Tensor:
    """``max(a, floor)``; the gradient is zero where the floor is active."""
    a = as_tensor(a)
    mask = a.data >= floor
    return _node(np.where(mask, a.data, floor), (a,), "clamp_min",
                 lambda g: _accumulate(a, g * mask))


def softmax_np(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = as_tensor(a)
    out = softmax_np(a.data)

    def bw(g):
        _accumulate(a, out * (g - (g * out).sum(axis=-1, keepdims=True)))

    return _node(out, (a,), "softmax", bw)


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def bw(g):
        _accumulate(a, g - np.exp(out) * g.sum(axis=-1, keepdims=True))

    return _node(out, (a,), "log_softmax", bw)


def logsumexp_np(x: np.ndarray, axis=-1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[axis] == 0:
        raise ValueError("logsumexp over an empty axis")
    m = x.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, axis=axis) + np.log(np.exp(x - m).sum(axis=axis))


def logsumexp(a, axis: int = -1) -> Tensor:
    """Max-shifted ``log(sum(exp(a)))`` along ``axis``."""
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[axis] == 0:
        raise ValueError("logsumexp over an empty axis")
    out = logsumexp_np(a.data, axis)

    def bw(g):
        weights = np.exp(a.data - np.expand_dims(out, axis))
        _accumulate(a, np.expand_dims(g, axis) * weights)

    return _node(out, (a,), "logsumexp", bw)


# reductions and shape ops


def sum_(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis)

    def bw(g):
        if axis is not None:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(ax % a.ndim for ax in axes)
            g = np.expand_dims(g, tuple(sorted(axes)))
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _node(out, (a,), "sum", bw)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return sum_(a, axis) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", tuple(shape), a.shape) from None
    return _node(out, (a,), "reshape", lambda g: _accumulate(a, g.reshape(a.shape)))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inverse = None if axes is None else np.argsort(axes)
    return _node(np.transpose(a.data, axes), (a,), "transpose",
                 lambda g: _accumulate(a, np.transpose(g, inverse)))


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(p is None or p is Ellipsis or isinstance(p, (int, np.integer, slice)) for p in parts)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        _accumulate(a, full)

    return _node(a.data[index], (a,), "getitem", bw)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", tensors[0].shape, [t.shape for t in tensors[1:]]) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            _accumulate(t, piece)

    return _node(out, tensors, "concat", bw)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim + 1
    axis = axis % ndim
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


# tape traversal


def topological_order(output: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(output, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack_.append((parent, False))
    return order


def backward(output: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from the scalar ``output``."""
    if output.size != 1:
        raise ShapeError("backward", (), output.shape)
    if not output.requires_grad:
        return
    order = topological_order(output)
    for node in order:
        if node._parents:
            node.grad = None
    output.grad = np.ones_like(output.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            # interior gradients are not needed once propagated
            node.grad = None


def grad(output: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of scalar ``output`` w.r.t. ``params``; zeros where unused."""
    params = list(params)
    for p in params:
        p.grad = None
    backward(output)
    return [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]


def numerical_grad(fn: Callable[[], float], param: Tensor, index=None, step: float = 1e-5):
    """Central finite difference of ``fn`` w.r.t. ``param.data[index]``.

    With ``index=None`` every coordinate is perturbed.
    """
    indices = np.ndindex(param.shape) if index is None else [index]
    out = np.zeros(param.shape) if index is None else None
    for idx in indices:
        original = param.data[idx]
        param.data[idx] = original + step
        f_plus = fn()
        param.data[idx] = original - step
        f_minus = fn()
        param.data[idx] = original
        value = (f_plus - f_minus) / (2.0 * step)
        if out is None:
            return value
        out[idx] = value
    return out


def relative_error(analytic, numeric, floor: float = 1e-8) -> np.ndarray:
    """Elementwise relative error; entries with absolute error under ``floor`` report 0."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    rel = np.divide(diff, scale, out=np.zeros_like(diff), where=scale > 0)
    return np.where(diff <= floor, 0.0, rel)
