"""A small reverse-mode differentiation engine over float64 numpy arrays.

Each :class:`Tensor` remembers the tensors it was computed from and a
closure that pushes its gradient back to them.  ``backward`` walks the graph
in reverse topological order, so every node's gradient is complete before it
is propagated further.

    >>> a = Tensor([1.0, 2.0], requires_grad=True)
    >>> (a * a).sum().backward()
    >>> a.grad
    array([2., 4.])
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        # never in place: ``g`` may be a read-only view shared with other nodes
        self.grad = g if self.grad is None else self.grad + g

    @staticmethod
    def _make(data, parents: Sequence[Tensor], backward) -> Tensor:
        out = Tensor(data)
        live = tuple(p for p in parents if p.requires_grad)
        if live:
            out.requires_grad = True
            out._parents = live
            out._backward = backward
        return out

    # --- elementwise arithmetic ---------------------------------------

    def __add__(self, other):
        other = as_tensor(other)

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.shape))

        return Tensor._make(self.data + other.data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: self._accumulate(-g))

    def __sub__(self, other):
        other = as_tensor(other)

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(-g, other.shape))

        return Tensor._make(self.data - other.data, (self, other), backward)

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.shape))

        return Tensor._make(self.data * other.data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        out_data = self.data / other.data

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g / other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(-g * out_data / other.data, other.shape))

        return Tensor._make(out_data, (self, other), backward)

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise TypeError("only constant exponents are supported")
        x = self.data

        def backward(g):
            self._accumulate(g * exponent * x ** (exponent - 1))

        return Tensor._make(x**exponent, (self,), backward)

    def __matmul__(self, other):
        other = as_tensor(other)
        if self.ndim != 2 or other.ndim != 2:
            raise ValueError("matmul is defined for 2-D tensors only")

        def backward(g):
            if self.requires_grad:
                self._accumulate(g @ other.data.T)
            if other.requires_grad:
                other._accumulate(self.data.T @ g)

        return Tensor._make(self.data @ other.data, (self, other), backward)

    def __rmatmul__(self, other):
        return as_tensor(other) @ self

    # --- unary functions ------------------------------------------------

    def exp(self):
        out_data = np.exp(self.data)
        return Tensor._make(out_data, (self,), lambda g: self._accumulate(g * out_data))

    def log(self):
        x = self.data
        return Tensor._make(np.log(x), (self,), lambda g: self._accumulate(g / x))

    def relu(self):
        mask = self.data > 0
        return Tensor._make(np.where(mask, self.data, 0.0), (self,), lambda g: self._accumulate(g * mask))

    def sigmoid(self):
        out_data = 0.5 * (1.0 + np.tanh(0.5 * self.data))
        return Tensor._make(out_data, (self,), lambda g: self._accumulate(g * out_data * (1.0 - out_data)))

    def clip(self, lo: float, hi: float):
        inside = (self.data >= lo) & (self.data <= hi)
        return Tensor._make(np.clip(self.data, lo, hi), (self,), lambda g: self._accumulate(g * inside))

    # --- shape manipulation and reductions ------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, shape))

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def reshape(self, *shape):
        old = self.shape
        return Tensor._make(self.data.reshape(*shape), (self,), lambda g: self._accumulate(g.reshape(old)))

    @property
    def T(self):
        return Tensor._make(self.data.T, (self,), lambda g: self._accumulate(g.T))

    def __getitem__(self, idx):
        shape = self.shape

        basic = all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in (idx if isinstance(idx, tuple) else (idx,)))

        def backward(g):
            full = np.zeros(shape)
            if basic:
                full[idx] = g
            else:
                np.add.at(full, idx, g)
            self._accumulate(full)

        return Tensor._make(self.data[idx], (self,), backward)

    # --- driver ---------------------------------------------------------

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
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
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.asarray(grad, dtype=np.float64))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # interior gradients are not needed once propagated
                node.grad = None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def sparse_matmul(matrix, x: Tensor) -> Tensor:
    """``matrix @ x`` for a constant (scipy.sparse or dense) ``matrix``."""
    x = as_tensor(x)
    mt = matrix.T

    def backward(g):
        x._accumulate(np.asarray(mt @ g))

    return Tensor._make(np.asarray(matrix @ x.data), (x,), backward)


def primitive(x: Tensor, fn: Callable[[np.ndarray], np.ndarray], vjp: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> Tensor:
    """Register an opaque function with a user-supplied vector-Jacobian product.

    ``vjp(x, g)`` must return the gradient with respect to ``x`` given the
    output cotangent ``g``.
    """
    x = as_tensor(x)
    x_data = x.data
    return Tensor._make(fn(x_data), (x,), lambda g: x._accumulate(vjp(x_data, g)))


def score(x: Tensor, density) -> Tensor:
    """Row-wise score of ``density`` as a differentiable operation.

    The backward pass contracts the cotangent with the score Jacobian; the
    Jacobian is symmetric so no transpose is needed.
    """
    return primitive(
        x,
        density.score,
        lambda xd, g: np.einsum("nd,nde->ne", g, density.score_jacobian(xd)),
    )
