"""Dense tensor with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record a closure computing the local partials; :meth:`Tensor.backward`
walks the recorded graph in reverse topological order.

Leaf tensors (parameters) accumulate into ``.grad`` across calls, so a
second ``backward`` without :func:`zero_grad` adds to the existing gradient.
Intermediate tensors only keep their gradient when :meth:`retain_grad` was
called before the backward pass.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

# per thread, so concurrent inference cannot switch recording off for a trainer
_state = threading.local()


class GraphNotBuilt(RuntimeError):
    """Raised when backward is requested on a tensor with no recorded graph."""


class ShapeMismatch(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (current thread only)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_retain")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._retain = False

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def retain_grad(self) -> "Tensor":
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    # graph construction -------------------------------------------------

    @staticmethod
    def from_op(data: np.ndarray, parents: Iterable["Tensor"], backward) -> "Tensor":
        """Wrap an op result, recording the graph edge when any parent needs grad."""
        parents = tuple(parents)
        out = Tensor(data)
        if grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    def _toposort(self) -> list["Tensor"]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return order

    def backward(self, grad: np.ndarray | None = None) -> None:
        if not self.requires_grad:
            raise GraphNotBuilt("tensor does not require grad; no graph was recorded")
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatch("backward without an explicit grad needs a scalar tensor")
            grad = np.ones_like(self.data)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(self._toposort()):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None or node._retain:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise ShapeMismatch(f"gradient shape {pg.shape} != tensor shape {parent.shape}")
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # arithmetic ------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -as_tensor(other, self.dtype))

    def sum(self) -> "Tensor":
        return total(self)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor.from_op(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor.from_op(out, (a, b), backward)


def total(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(dtype=np.float64), dtype=a.dtype)

    def backward(g):
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return Tensor.from_op(out, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.shape),)

    return Tensor.from_op(out, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return Tensor.from_op(out, tensors, backward)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
