"""Reverse-mode automatic differentiation over float64 numpy arrays.

Tensors wrap ndarrays and record a backward closure per operation; calling
backward() on a scalar result walks the graph in reverse topological order and
accumulates gradients. Everything is 64-bit so finite-difference checks can be
tight. A no_grad context skips graph construction for inference.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable

import numpy as np
from scipy.special import expit

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the context (forward values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: tuple = (), _backward: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad and _grad_enabled
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None

    # ------------------------------------------------------------------
    # plumbing
    # ------------------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    def _accumulate(self, grad: np.ndarray) -> None:
        # Copy on first write: backward closures may hand the same array to
        # several parents, so taking ownership of a reference is unsafe.
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64)
        else:
            self.grad += grad

    def zero_grad(self) -> None:
        self.grad = None

    # ------------------------------------------------------------------
    # arithmetic
    # ------------------------------------------------------------------

    @staticmethod
    def _wrap(other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    def __add__(self, other) -> "Tensor":
        other = self._wrap(other)
        out_data = self.data + other.data
        if not (self.requires_grad or other.requires_grad) or not _grad_enabled:
            return Tensor(out_data)

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.data.shape))

        return Tensor(out_data, True, (self, other), backward)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return self * -1.0

    def __sub__(self, other) -> "Tensor":
        return self + (-self._wrap(other))

    def __rsub__(self, other) -> "Tensor":
        return self._wrap(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = self._wrap(other)
        out_data = self.data * other.data
        if not (self.requires_grad or other.requires_grad) or not _grad_enabled:
            return Tensor(out_data)

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.data.shape))

        return Tensor(out_data, True, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = self._wrap(other)
        return self * other ** -1.0

    def __rtruediv__(self, other) -> "Tensor":
        return self._wrap(other) * self ** -1.0

    def __pow__(self, exponent: float) -> "Tensor":
        if isinstance(exponent, Tensor):
            raise TypeError("only scalar exponents are supported")
        out_data = self.data ** exponent
        if not self.requires_grad or not _grad_enabled:
            return Tensor(out_data)

        def backward(g):
            self._accumulate(g * exponent * self.data ** (exponent - 1.0))

        return Tensor(out_data, True, (self,), backward)

    def __matmul__(self, other) -> "Tensor":
        other = self._wrap(other)
        out_data = self.data @ other.data
        if not (self.requires_grad or other.requires_grad) or not _grad_enabled:
            return Tensor(out_data)

        def backward(g):
            if self.requires_grad:
                ga = g @ np.swapaxes(other.data, -1, -2)
                self._accumulate(_unbroadcast(ga, self.data.shape))
            if other.requires_grad:
                gb = np.swapaxes(self.data, -1, -2) @ g
                other._accumulate(_unbroadcast(gb, other.data.shape))

        return Tensor(out_data, True, (self, other), backward)

    # ------------------------------------------------------------------
    # elementwise functions
    # ------------------------------------------------------------------

    def _unary(self, out_data: np.ndarray, dlocal: np.ndarray) -> "Tensor":
        if not self.requires_grad or not _grad_enabled:
            return Tensor(out_data)

        def backward(g):
            self._accumulate(g * dlocal)

        return Tensor(out_data, True, (self,), backward)

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return self._unary(out, out)

    def log(self) -> "Tensor":
        return self._unary(np.log(self.data), 1.0 / self.data)

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return self._unary(out, 0.5 / out)

    def tanh(self) -> "Tensor":
        out = np.tanh(self.data)
        return self._unary(out, 1.0 - out * out)

    def sigmoid(self) -> "Tensor":
        out = expit(self.data)
        return self._unary(out, out * (1.0 - out))

    def relu(self) -> "Tensor":
        out = np.maximum(self.data, 0.0)
        return self._unary(out, (self.data > 0.0).astype(np.float64))

    def silu(self) -> "Tensor":
        s = expit(self.data)
        out = self.data * s
        return self._unary(out, s * (1.0 + self.data * (1.0 - s)))

    def clip(self, lo: float, hi: float) -> "Tensor":
        out = np.clip(self.data, lo, hi)
        inside = ((self.data >= lo) & (self.data <= hi)).astype(np.float64)
        return self._unary(out, inside)

    # ------------------------------------------------------------------
    # reductions and shape ops
    # ------------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out_data = self.data.sum(axis=axis, keepdims=keepdims)
        if not self.requires_grad or not _grad_enabled:
            return Tensor(out_data)
        in_shape = self.data.shape

        def backward(g):
            if axis is None:
                self._accumulate(np.broadcast_to(g, in_shape).copy())
                return
            gg = g
            if not keepdims:
                axes = axis if isinstance(axis, tuple) else (axis,)
                for ax in sorted(a % len(in_shape) for a in axes):
                    gg = np.expand_dims(gg, ax)
            self._accumulate(np.broadcast_to(gg, in_shape).copy())

        return Tensor(out_data, True, (self,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else (
            np.prod([self.data.shape[a] for a in
                     (axis if isinstance(axis, tuple) else (axis,))]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(count))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out_data = self.data.reshape(shape)
        if not self.requires_grad or not _grad_enabled:
            return Tensor(out_data)
        in_shape = self.data.shape

        def backward(g):
            self._accumulate(g.reshape(in_shape))

        return Tensor(out_data, True, (self,), backward)

    def transpose(self, axes: tuple[int, ...]) -> "Tensor":
        out_data = self.data.transpose(axes)
        if not self.requires_grad or not _grad_enabled:
            return Tensor(out_data)
        inverse = tuple(np.argsort(axes))

        def backward(g):
            self._accumulate(g.transpose(inverse))

        return Tensor(out_data, True, (self,), backward)

    def swapaxes(self, a: int, b: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(tuple(axes))

    def __getitem__(self, key) -> "Tensor":
        out_data = self.data[key]
        if not self.requires_grad or not _grad_enabled:
            return Tensor(out_data)

        def backward(g):
            full = np.zeros_like(self.data)
            np.add.at(full, key, g)
            self._accumulate(full)

        return Tensor(out_data, True, (self,), backward)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    if not any(t.requires_grad for t in tensors) or not _grad_enabled:
        return Tensor(out_data)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, a, b in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(a, b)
                t._accumulate(g[tuple(idx)])

    return Tensor(out_data, True, tuple(tensors), backward)


def stack(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out_data = np.stack([t.data for t in tensors], axis=axis)
    if not any(t.requires_grad for t in tensors) or not _grad_enabled:
        return Tensor(out_data)

    def backward(g):
        slabs = np.moveaxis(g, axis, 0)
        for t, slab in zip(tensors, slabs):
            if t.requires_grad:
                t._accumulate(slab)

    return Tensor(out_data, True, tuple(tensors), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Shift-invariant softmax; the max shift is constant w.r.t. the graph."""
    shifted = x - Tensor(x.data.max(axis=axis, keepdims=True))
    e = shifted.exp()
    return e / e.sum(axis=axis, keepdims=True)
