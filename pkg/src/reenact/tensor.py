"""Dense tensors with reverse-mode gradient accumulation.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record their parents and a backward closure; calling
:meth:`Tensor.backward` on a scalar walks the recorded graph in reverse
topological order and accumulates gradients into every leaf.

Leaf gradients accumulate additively across calls and must be cleared
explicitly (:meth:`Tensor.zero_grad`) between batches.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

_DTYPE: type = np.float32
_GRAD_ENABLED = True
_CHECK_FINITE = False


class NumericalError(FloatingPointError):
    """Raised when a NaN/Inf shows up where finite values are required."""


def get_dtype():
    return _DTYPE


def set_dtype(dtype) -> None:
    """Switch the substrate precision (``float32`` or ``float64``)."""
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _DTYPE = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    old = _DTYPE
    set_dtype(dtype)
    try:
        yield
    finally:
        set_dtype(old)


def float64_mode():
    """Context manager running everything created inside in 64-bit."""
    return precision(np.float64)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def check_finite(enabled: bool = True) -> Iterator[None]:
    """Verify every op output is finite while active (slow; for debugging)."""
    global _CHECK_FINITE
    old = _CHECK_FINITE
    _CHECK_FINITE = enabled
    try:
        yield
    finally:
        _CHECK_FINITE = old


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or _DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = np.zeros_like(arr) if requires_grad else None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            if self.grad is None:
                self.grad = np.zeros_like(self.data)
            else:
                self.grad.fill(0)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    # -- graph ------------------------------------------------------------
    def backward(self, retain_graph: bool = False) -> None:
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.data.shape:
                    raise RuntimeError(f"gradient shape {pg.shape} != tensor shape {parent.shape}")
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            if not retain_graph:
                node._parents = ()
                node._backward = None
                node.requires_grad = False

    # -- arithmetic (same-shape or scalar only) ---------------------------
    def __add__(self, other):
        if isinstance(other, Tensor):
            _same_shape(self, other, "add")
            return make_result(self.data + other.data, (self, other), lambda g: (g, g))
        return make_result(self.data + other, (self,), lambda g: (g,))

    __radd__ = __add__

    def __neg__(self):
        return make_result(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        if isinstance(other, Tensor):
            _same_shape(self, other, "sub")
            return make_result(self.data - other.data, (self, other), lambda g: (g, -g))
        return make_result(self.data - other, (self,), lambda g: (g,))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Tensor):
            _same_shape(self, other, "mul")
            a, b = self.data, other.data
            return make_result(a * b, (self, other), lambda g: (g * b, g * a))
        c = other
        return make_result(self.data * c, (self,), lambda g: (g * c,))

    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        shape = self.data.shape
        dt = self.data.dtype
        return make_result(
            np.asarray(self.data.sum(), dtype=dt),
            (self,),
            lambda g: (np.broadcast_to(g, shape).astype(dt, copy=True),),
        )

    def mean(self) -> "Tensor":
        return self.sum() * (1.0 / self.data.size)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        return make_result(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))


def _raise_not_scalar(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape} (no implicit broadcasting)")


def make_result(data: np.ndarray, parents: tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
    """Wrap an op output, recording the graph edge when gradients are needed."""
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NumericalError("non-finite values produced by forward op")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.grad = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


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
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)
