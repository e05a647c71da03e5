"""Dense float32 tensors with reverse-mode automatic differentiation.

Every differentiable primitive is a :class:`Function` subclass. Applying a
function records a node on the graph (the tape); :meth:`Tensor.backward`
replays those nodes in reverse topological order.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Iterable, Sequence

import numpy as np

DTYPE = np.float32

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """N-dimensional array with an optional gradient buffer.

    ``data`` is float32 unless ``dtype=np.float64`` is requested explicitly;
    float64 exists so gradient checks can run finite differences without
    single-precision cancellation noise. Every primitive preserves the dtype
    it is given.
    """

    __slots__ = ("data", "grad", "requires_grad", "_ctx", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        dtype = np.dtype(DTYPE if dtype is None else dtype)
        if dtype not in (np.float32, np.float64):
            raise TypeError(f"unsupported tensor dtype {dtype}")
        arr = np.asarray(data, dtype=dtype)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._ctx: Function | None = None
        self._consumed = False
        self.name = name

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- autograd -----------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf.

        A graph can be walked once. Calling ``backward`` a second time on the
        same output raises; run the forward pass again to get a fresh graph.
        """
        if self._consumed:
            raise RuntimeError(
                "backward() already ran on this graph; recompute the forward pass first"
            )
        if not self.requires_grad:
            raise RuntimeError("tensor does not require grad and has no grad graph")
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise ValueError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            ctx = node._ctx
            if ctx is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            in_grads = ctx.backward(g)
            if not isinstance(in_grads, tuple):
                in_grads = (in_grads,)
            for parent, pg in zip(ctx.parents, in_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise RuntimeError(
                        f"{type(ctx).__name__}.backward returned grad of shape {pg.shape} "
                        f"for input of shape {parent.shape}"
                    )
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
        for node in order:
            if node._ctx is not None:
                node._consumed = True
                node._ctx.release()

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, like=self)))

    def __rsub__(self, other):
        return add(as_tensor(other, like=self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / float(other))

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        if node._consumed and node is not root:
            raise RuntimeError("graph contains a node whose backward() already ran")
        seen.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for p in node._ctx.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=like.dtype if like is not None else None)


class Function:
    """One primitive on the tape.

    Subclasses implement ``forward`` on raw arrays (saving whatever backward
    needs on ``self``) and ``backward`` returning one gradient per input.
    """

    def __init__(self, *parents: Tensor):
        self.parents = parents

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray):
        raise NotImplementedError

    def release(self) -> None:
        self.__dict__.clear()
        self.parents = ()

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        tensors = tuple(as_tensor(t) for t in inputs)
        fn = cls(*tensors)
        res = fn.forward(*(t.data for t in tensors), **kwargs)
        out = Tensor(res, dtype=res.dtype)
        if is_grad_enabled() and any(t.requires_grad for t in tensors):
            out.requires_grad = True
            out._ctx = fn
        return out


def unbroadcast(grad: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise / shape primitives -------------------------------------------
class Add(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        sa, sb = self.shapes
        return unbroadcast(grad, sa), unbroadcast(grad, sb)


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return unbroadcast(grad * self.b, self.a.shape), unbroadcast(grad * self.a, self.b.shape)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return -grad


class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            axes = (self.axis,) if isinstance(self.axis, int) else self.axis
            axes = tuple(ax % len(self.shape) for ax in axes)
            grad = np.expand_dims(grad, axes)
        return np.broadcast_to(grad, self.shape).copy()


class Reshape(Function):
    def forward(self, a, shape=()):
        self.shape = a.shape
        return a.reshape(shape)

    def backward(self, grad):
        return grad.reshape(self.shape)


class Relu(Function):
    def forward(self, a):
        self.mask = a > 0
        # np.maximum propagates NaN, so divergence is not silently masked
        return np.maximum(a, a.dtype.type(0))

    def backward(self, grad):
        return grad * self.mask


class Sigmoid(Function):
    def forward(self, a):
        # split by sign so neither branch overflows
        out = np.empty_like(a)
        pos = a >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        e = np.exp(a[~pos])
        out[~pos] = e / (1.0 + e)
        self.out = out
        return out

    def backward(self, grad):
        return grad * self.out * (1.0 - self.out)


def add(a, b) -> Tensor:
    a = as_tensor(a)
    return Add.apply(a, as_tensor(b, like=a))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    return Mul.apply(a, as_tensor(b, like=a))


def neg(a) -> Tensor:
    return Neg.apply(a)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape: Iterable[int]) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def relu(a) -> Tensor:
    return Relu.apply(a)


def sigmoid(a) -> Tensor:
    return Sigmoid.apply(a)
