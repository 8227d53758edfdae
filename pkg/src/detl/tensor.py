"""Tensor container and the reverse-mode tape.

Every differentiable primitive in :mod:`detl.ops` returns a :class:`Tensor`
carrying a :class:`TapeNode` that remembers its inputs and a closure for the
backward rule. :func:`backward` walks those nodes in reverse topological order
and then clears them, so each forward graph can be differentiated once.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
_grad_enabled = True


class TapeError(RuntimeError):
    """Raised when backward is requested on a graph that has no live tape."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


@dataclass(eq=False)
class TapeNode:
    op: str
    inputs: Sequence["Tensor"]
    # maps the output gradient to one gradient (or None) per input
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]] = field(repr=False)


class Tensor:
    """Dense float array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "node", "_spent")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.data: np.ndarray = np.asarray(arr, dtype=dtype, order="C")
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.node: Optional[TapeNode] = None
        self._spent = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        backward(self, grad)

    def __repr__(self) -> str:
        op = self.node.op if self.node is not None else "leaf"
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={op}, requires_grad={self.requires_grad})"


def make_result(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap an op output, attaching a tape node when any input needs a gradient."""
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = TapeNode(op, tuple(inputs), backward_fn)
    return out


@contextlib.contextmanager
def no_grad():
    """Disable taping inside the block (inference and finite-difference probes)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in t.node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(root: Tensor, grad=None) -> None:
    """Populate ``.grad`` on every tensor reachable from ``root`` that requires one.

    Leaf gradients accumulate onto any existing ``.grad``; gradients of a tensor
    feeding several consumers are summed. The tape is cleared afterwards.
    """
    if root._spent:
        raise TapeError("backward already ran on this graph; run a new forward pass first")
    if not root.requires_grad:
        raise TapeError("tensor does not require grad and has no tape")
    if grad is None:
        if root.size != 1:
            raise TapeError("an explicit seed gradient is required for non-scalar outputs")
        seed = np.ones_like(root.data)
    else:
        seed = np.asarray(grad, dtype=root.dtype).reshape(root.shape)

    order = _topological_order(root)
    grads: dict[int, np.ndarray] = {id(root): seed}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        t.grad = g
        for parent, pg in zip(t.node.inputs, t.node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = pg.astype(parent.dtype, copy=False)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for t in order:
        if t.node is not None:
            t.node = None
            t._spent = True
