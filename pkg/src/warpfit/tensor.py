"""Reverse-mode automatic differentiation on numpy arrays.

Operations build the graph eagerly: each one returns a new Tensor holding
the forward value plus a closure that routes an incoming gradient to the
operation's inputs. ``backward()`` on a scalar walks the recorded graph
once in reverse topological order and accumulates gradients into every
tensor created with ``requires_grad=True``. The traversal order is fixed
by graph construction order, so repeated runs over the same graph shape
accumulate in the same order and are bit-identical.

Float32 is the default scalar type for training. Verification code that
compares against finite differences should run under
``use_dtype(np.float64)``.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

from .errors import DimensionError, ParameterError

_LOCAL = threading.local()


def _tls():
    if not hasattr(_LOCAL, "dtype"):
        _LOCAL.dtype = np.dtype(np.float32)
        _LOCAL.grad_enabled = True
    return _LOCAL


def default_dtype() -> np.dtype:
    return _tls().dtype


def set_default_dtype(dtype) -> None:
    _tls().dtype = np.dtype(dtype)


@contextlib.contextmanager
def use_dtype(dtype):
    """Temporarily switch the default scalar type for new tensors."""
    state = _tls()
    previous = state.dtype
    state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        state.dtype = previous


def grad_enabled() -> bool:
    return _tls().grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable graph recording; forward values are still computed."""
    state = _tls()
    previous = state.grad_enabled
    state.grad_enabled = False
    try:
        yield
    finally:
        state.grad_enabled = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else default_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- bookkeeping ---------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def astype(self, dtype) -> "Tensor":
        """Differentiable dtype cast; the gradient is cast back on the way down."""
        dtype = np.dtype(dtype)
        out_data = self.data.astype(dtype)

        def bwd(g):
            _accumulate(self, g.astype(self.data.dtype))

        return _from_op(out_data, (self,), bwd)

    def __repr__(self) -> str:
        return (
            f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, "
            f"requires_grad={self.requires_grad})"
        )

    def __len__(self) -> int:
        return len(self.data)

    # -- arithmetic -----------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other, self)
        out_data = self.data + other.data

        def bwd(g):
            _accumulate(self, _sum_to_shape(g, self.data.shape))
            _accumulate(other, _sum_to_shape(g, other.data.shape))

        return _from_op(out_data, (self, other), bwd)

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other, self)
        out_data = self.data - other.data

        def bwd(g):
            _accumulate(self, _sum_to_shape(g, self.data.shape))
            _accumulate(other, _sum_to_shape(-g, other.data.shape))

        return _from_op(out_data, (self, other), bwd)

    def __rsub__(self, other):
        return as_tensor(other, self).__sub__(self)

    def __mul__(self, other):
        other = as_tensor(other, self)
        out_data = self.data * other.data

        def bwd(g):
            _accumulate(self, _sum_to_shape(g * other.data, self.data.shape))
            _accumulate(other, _sum_to_shape(g * self.data, other.data.shape))

        return _from_op(out_data, (self, other), bwd)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other, self)
        out_data = self.data / other.data

        def bwd(g):
            _accumulate(self, _sum_to_shape(g / other.data, self.data.shape))
            _accumulate(other, _sum_to_shape(-g * self.data / (other.data * other.data), other.data.shape))

        return _from_op(out_data, (self, other), bwd)

    def __rtruediv__(self, other):
        return as_tensor(other, self).__truediv__(self)

    def __neg__(self):
        def bwd(g):
            _accumulate(self, -g)

        return _from_op(-self.data, (self,), bwd)

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise ParameterError("only scalar exponents are supported")
        p = float(exponent)
        out_data = self.data ** p

        def bwd(g):
            _accumulate(self, g * p * self.data ** (p - 1.0))

        return _from_op(out_data, (self,), bwd)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- shape manipulation ----------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out_data = self.data.reshape(shape)

        def bwd(g):
            _accumulate(self, g.reshape(self.data.shape))

        return _from_op(out_data, (self,), bwd)

    def transpose(self, axes=None):
        out_data = self.data.transpose(axes)
        inv = None if axes is None else np.argsort(axes)

        def bwd(g):
            _accumulate(self, g.transpose(inv))

        return _from_op(out_data, (self,), bwd)

    def swap_last_axes(self):
        """Transpose the last two axes, keeping leading batch axes in place."""
        if self.ndim < 2:
            raise DimensionError("swap_last_axes needs at least two axes")
        axes = tuple(range(self.ndim - 2)) + (self.ndim - 1, self.ndim - 2)
        return self.transpose(axes)

    def __getitem__(self, index):
        out_data = self.data[index]
        advanced = _has_advanced_index(index)

        def bwd(g):
            if not self.requires_grad:
                return
            buf = np.zeros_like(self.data)
            if advanced:
                # repeated indices must add, not overwrite
                np.add.at(buf, index, g)
            else:
                buf[index] += g
            _accumulate(self, buf)

        return _from_op(out_data, (self,), bwd)

    # -- reductions -------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def bwd(g):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            _accumulate(self, np.broadcast_to(gg, self.data.shape))

        return _from_op(out_data, (self,), bwd)

    def mean(self, axis=None, keepdims: bool = False):
        out_data = self.data.mean(axis=axis, keepdims=keepdims)
        scale = self.data.size / max(out_data.size, 1)

        def bwd(g):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            _accumulate(self, np.broadcast_to(gg, self.data.shape) / scale)

        return _from_op(out_data, (self,), bwd)

    # -- elementwise nonlinearities ----------------------------------------

    def exp(self):
        out_data = np.exp(self.data)

        def bwd(g):
            _accumulate(self, g * out_data)

        return _from_op(out_data, (self,), bwd)

    def log(self):
        out_data = np.log(self.data)

        def bwd(g):
            _accumulate(self, g / self.data)

        return _from_op(out_data, (self,), bwd)

    def sqrt(self):
        out_data = np.sqrt(self.data)

        def bwd(g):
            _accumulate(self, g * 0.5 / out_data)

        return _from_op(out_data, (self,), bwd)

    def abs(self):
        out_data = np.abs(self.data)

        def bwd(g):
            _accumulate(self, g * np.sign(self.data))

        return _from_op(out_data, (self,), bwd)


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    """Wrap scalars/arrays as constant tensors, matching ``like``'s dtype.

    Python scalars would otherwise promote float32 graphs to float64 under
    numpy's rules once they arrive as 0-d arrays.
    """
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if like is not None else default_dtype()
    return Tensor(np.asarray(value, dtype=dtype), dtype=dtype)


def _from_op(data, parents, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _accumulate(t: Tensor, g) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _sum_to_shape(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back down to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _has_advanced_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return any(isinstance(p, (np.ndarray, list)) for p in parts)


def matmul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul expects operands with at least two axes")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            _accumulate(a, _sum_to_shape(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            _accumulate(b, _sum_to_shape(gb, b.data.shape))

    return _from_op(out_data, (a, b), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ParameterError("concat needs at least one tensor")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def bwd(g):
        for t, part in zip(tensors, np.split(g, offsets, axis=axis)):
            _accumulate(t, part)

    return _from_op(out_data, tuple(tensors), bwd)


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    d = x.data
    out_data = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))

    def bwd(g):
        _accumulate(x, g * out_data * (1.0 - out_data))

    return _from_op(out_data, (x,), bwd)


def leaky_relu(x: Tensor, alpha: float = 1e-4) -> Tensor:
    if alpha < 0:
        raise ParameterError(f"leaky_relu slope must be non-negative, got {alpha}")
    x = as_tensor(x)
    factor = np.where(x.data > 0, 1.0, alpha).astype(x.data.dtype)
    out_data = x.data * factor

    def bwd(g):
        _accumulate(x, g * factor)

    return _from_op(out_data, (x,), bwd)


def elu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    neg = np.expm1(np.minimum(x.data, 0.0))
    out_data = np.where(x.data > 0, x.data, neg)

    def bwd(g):
        _accumulate(x, g * np.where(x.data > 0, 1.0, neg + 1.0))

    return _from_op(out_data, (x,), bwd)


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``."""
    if loss.data.size != 1:
        raise DimensionError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    # iterative post-order DFS; order is frozen by construction order of the graph
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent._backward is not None and id(parent) not in visited:
                stack.append((parent, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grad(tensors) -> None:
    values = tensors.values() if isinstance(tensors, dict) else tensors
    for t in values:
        t.grad = None
