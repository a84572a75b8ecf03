"""Shape-carrying tensor with a paired gradient buffer and reverse-mode autodiff.

A ``Tensor`` wraps a float64 numpy array. Operations record their inputs and a
backward closure on the result; ``backward()`` runs the closures in reverse
topological order, visiting each node exactly once, and accumulates into the
``grad`` buffers of tensors created with ``requires_grad=True`` (and of any
intermediate on a path to one).

Only the operations the detector needs are implemented; this is not a general
autograd framework. Forward passes are deterministic: no kernel draws random
numbers.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np


def _as_f64(data) -> np.ndarray:
    return np.asarray(data, dtype=np.float64)


def _sum_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_f64(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- bookkeeping -----------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        tag = self.name or "tensor"
        return "Tensor(%s, shape=%s, requires_grad=%s)" % (
            tag, self.data.shape, self.requires_grad)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Reverse-mode sweep from this tensor.

        Without an explicit seed gradient the tensor must be a scalar.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(
                    "backward() without a gradient requires a scalar, got shape %s"
                    % (self.data.shape,))
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, emitted = stack.pop()
            if emitted:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.accumulate(_as_f64(grad))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic ------------------------------------------------------------

    def _coerce(self, other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    def __add__(self, other):
        other = self._coerce(other)
        data = self.data + other.data
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a.accumulate(_sum_to(g, a.data.shape))
            if b.requires_grad:
                b.accumulate(_sum_to(g, b.data.shape))

        return Tensor._make(data, (a, b), backward)

    __radd__ = __add__

    def __neg__(self):
        a = self
        return Tensor._make(-a.data, (a,), lambda g: a.accumulate(-g) if a.requires_grad else None)

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) + (-self)

    def __mul__(self, other):
        other = self._coerce(other)
        a, b = self, other
        data = a.data * b.data

        def backward(g):
            if a.requires_grad:
                a.accumulate(_sum_to(g * b.data, a.data.shape))
            if b.requires_grad:
                b.accumulate(_sum_to(g * a.data, b.data.shape))

        return Tensor._make(data, (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        a, b = self, other
        data = a.data / b.data

        def backward(g):
            if a.requires_grad:
                a.accumulate(_sum_to(g / b.data, a.data.shape))
            if b.requires_grad:
                b.accumulate(_sum_to(-g * a.data / (b.data * b.data), b.data.shape))

        return Tensor._make(data, (a, b), backward)

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def __matmul__(self, other):
        other = self._coerce(other)
        a, b = self, other
        if a.data.ndim != 2 or b.data.ndim != 2:
            raise ValueError(
                "matmul expects 2D operands, got %s @ %s" % (a.data.shape, b.data.shape))
        data = a.data @ b.data

        def backward(g):
            if a.requires_grad:
                a.accumulate(g @ b.data.T)
            if b.requires_grad:
                b.accumulate(a.data.T @ g)

        return Tensor._make(data, (a, b), backward)

    # -- elementwise nonlinearities ---------------------------------------------

    def relu(self):
        a = self
        mask = a.data > 0.0
        return Tensor._make(
            np.where(mask, a.data, 0.0), (a,),
            lambda g: a.accumulate(g * mask) if a.requires_grad else None)

    def sigmoid(self):
        a = self
        out_data = 1.0 / (1.0 + np.exp(-a.data))

        def backward(g):
            if a.requires_grad:
                a.accumulate(g * out_data * (1.0 - out_data))

        return Tensor._make(out_data, (a,), backward)

    def exp(self):
        a = self
        out_data = np.exp(a.data)
        return Tensor._make(
            out_data, (a,),
            lambda g: a.accumulate(g * out_data) if a.requires_grad else None)

    def log(self):
        a = self
        return Tensor._make(
            np.log(a.data), (a,),
            lambda g: a.accumulate(g / a.data) if a.requires_grad else None)

    def powc(self, exponent: float):
        """Elementwise power with a constant exponent."""
        a = self
        e = float(exponent)
        data = a.data ** e

        def backward(g):
            if a.requires_grad:
                a.accumulate(g * e * a.data ** (e - 1.0))

        return Tensor._make(data, (a,), backward)

    def clamp(self, lo: float, hi: float):
        """Clip values to [lo, hi]; gradient passes only inside the interval."""
        a = self
        inside = (a.data >= lo) & (a.data <= hi)
        return Tensor._make(
            np.clip(a.data, lo, hi), (a,),
            lambda g: a.accumulate(g * inside) if a.requires_grad else None)

    # -- reductions and reshaping -------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self
        data = a.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if not a.requires_grad:
                return
            if axis is None:
                a.accumulate(np.broadcast_to(g, a.data.shape).copy()
                             if np.ndim(g) else np.full_like(a.data, g))
            else:
                ge = g if keepdims else np.expand_dims(g, axis)
                a.accumulate(np.broadcast_to(ge, a.data.shape).copy())

        return Tensor._make(data, (a,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return Tensor._make(
            a.data.reshape(shape), (a,),
            lambda g: a.accumulate(g.reshape(a.data.shape)) if a.requires_grad else None)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        a = self
        inv = np.argsort(axes)
        return Tensor._make(
            a.data.transpose(axes), (a,),
            lambda g: a.accumulate(g.transpose(inv)) if a.requires_grad else None)

    def take_rows(self, idx):
        """Select rows along axis 0 with an integer index array."""
        a = self
        idx = np.asarray(idx, dtype=np.int64)
        data = a.data[idx]

        def backward(g):
            if a.requires_grad:
                buf = np.zeros_like(a.data)
                np.add.at(buf, idx, g)
                a.accumulate(buf)

        return Tensor._make(data, (a,), backward)

    def max_over_axis(self, axis: int):
        """Max reduction returning (values, argmax).

        Gradient is routed only to the argmax positions; ties go to the first
        (lowest) index, matching ``np.argmax``.
        """
        a = self
        idx = np.argmax(a.data, axis=axis)
        data = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

        def backward(g):
            if not a.requires_grad:
                return
            buf = np.zeros_like(a.data)
            np.put_along_axis(
                buf, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
            a.accumulate(buf)

        out = Tensor._make(data, (a,), backward)
        return out, idx


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = list(tensors)
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(ts, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t.accumulate(piece)

    return Tensor._make(data, ts, backward)
