"""Tensor node of the reverse-mode graph."""

from __future__ import annotations

import numpy as np

from ..errors import NoGraph


class Tensor:
    """Dense array plus the closure that pushes its gradient to its parents.

    ``data`` is usually 5-D (batch, channel, depth, height, width); losses are
    0-D.  Leaves with ``requires_grad`` collect ``grad``; interior nodes keep
    theirs only until ``backward`` finishes.
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "name", "pattern")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, op="leaf", name=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op
        self.name = name
        self.pattern = None  # discrete branch choices (relu masks, pool argmax)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.data.shape}, dtype={self.data.dtype})"

    def backward(self, grad=None):
        backward(self, grad)


class Parameter(Tensor):
    """Trainable leaf carrying its Adam moments."""

    __slots__ = ("m", "v", "step")

    def __init__(self, data, name=None):
        super().__init__(np.asarray(data), requires_grad=True, name=name)
        self.m = np.zeros_like(self.data, dtype=np.float64)
        self.v = np.zeros_like(self.data, dtype=np.float64)
        self.step = 0


def make_node(data, parents, backward_fn, op, pattern=None) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    node = Tensor(data, requires_grad=needs, parents=parents if needs else (),
                  backward_fn=backward_fn if needs else None, op=op)
    node.pattern = pattern
    return node


def activation_pattern(root: Tensor) -> bytes:
    """Concatenated branch decisions of every non-smooth op in the graph.

    Two forward passes with equal patterns lie on the same smooth piece of
    the loss surface.
    """
    return b"".join(
        np.ascontiguousarray(n.pattern).tobytes() for n in _topological(root) if n.pattern is not None
    )


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, grad=None) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every tracked leaf."""
    if not root.requires_grad:
        raise NoGraph("backward() called on a tensor with no recorded graph")
    if grad is None:
        if root.data.size != 1:
            raise NoGraph("implicit gradient only defined for scalar outputs")
        grad = np.ones_like(root.data)
    grads = {id(root): np.asarray(grad, dtype=root.data.dtype)}
    for node in reversed(_topological(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
