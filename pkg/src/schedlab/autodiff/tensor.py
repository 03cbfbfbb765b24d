"""Dense float64 tensors with reverse-mode gradient accumulation.

The graph is recorded dynamically: every op wires its output to its inputs
through a backward closure. ``backward`` walks the recorded graph once in
reverse topological order, accumulates gradients into every tracked tensor,
and then drops the tape so a tensor can be reused as a fresh leaf.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when an op receives inputs whose extents do not conform."""


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[["Tensor"], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy(), requires_grad=False)

    def accumulate_grad(self, delta: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            # copy: delta may alias another tensor's buffer or a view
            self.grad = np.array(delta, dtype=np.float64)
            if self.grad.shape != self.values.shape:
                self.grad = np.broadcast_to(
                    self.grad, self.values.shape).copy()
        else:
            self.grad += delta

    def clear_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Thin operator sugar; the real kernels live in ops.py.
    def __add__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            return ops.add(self, other)
        return ops.shift(self, float(other))

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            return ops.mul(self, other)
        return ops.scale(self, float(other))

    __rmul__ = __mul__

    def __sub__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            return ops.sub(self, other)
        return ops.shift(self, -float(other))

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)


def as_tensor(value, requires_grad: bool = False) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, requires_grad=requires_grad)


def make_result(values: np.ndarray, parents: Sequence[Tensor],
                backward: Callable[["Tensor"], None]) -> Tensor:
    """Wrap an op result, wiring the tape only when some input is tracked."""
    out = Tensor(values)
    for p in parents:
        if p.requires_grad:
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            break
    return out


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every tracked leaf reachable from root.

    The root must be scalar-shaped. Gradients add across multiple uses of the
    same tensor. The recorded tape is severed afterwards.
    """
    if root.values.size != 1:
        raise ShapeError(
            f"backward root must be scalar-shaped, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("backward root was not produced by tracked computation")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))

    root.grad = np.ones_like(root.values)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node)
    for node in topo:
        node._parents = ()
        node._backward = None
