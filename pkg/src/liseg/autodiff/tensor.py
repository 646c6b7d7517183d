"""Tensor node and the reverse-mode engine."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class Tensor:
    """A float64 array that records the operation that produced it.

    Leaves created with ``requires_grad=True`` own a persistent ``grad`` buffer that
    ``backward`` accumulates into. Non-leaf tensors keep gradients only transiently.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        data = np.asarray(data, dtype=np.float64)
        self.data = data if data.flags.c_contiguous else data.copy()
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.op = "leaf"
        self.name = name

    @classmethod
    def _from_op(cls, data, parents: Sequence["Tensor"], backward_fn, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data if data.dtype == np.float64 else data.astype(np.float64)
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        out._parents = tuple(parents)
        out._backward = backward_fn if out.requires_grad else None
        out.op = op
        out.name = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return not self._parents

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # arithmetic needed by the losses; shapes must agree exactly (no broadcasting)
    def __add__(self, other):
        from .ops import add

        return add(self, other)

    def __mul__(self, other):
        from .ops import mul, scale

        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def sum(self):
        from .ops import tensor_sum

        return tensor_sum(self)

    def backward(self):
        backward(self)


@dataclass
class NodeRecord:
    op: str
    inputs: tuple
    output: int


@dataclass
class Graph:
    """Topologically ordered view of the computation that produced ``output``."""

    output: Tensor
    order: list = field(default_factory=list)  # tensors, inputs before consumers

    @classmethod
    def trace(cls, output: Tensor) -> "Graph":
        order, seen = [], set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(output=output, order=order)

    @property
    def nodes(self) -> list:
        return [NodeRecord(t.op, tuple(id(p) for p in t._parents), id(t)) for t in self.order if not t.is_leaf]

    @property
    def leaves(self) -> list:
        return [id(t) for t in self.order if t.is_leaf]


def backward(loss: Tensor) -> Graph:
    """Accumulate d(loss)/d(leaf) into every ``requires_grad`` leaf's ``grad``."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = Graph.trace(loss)
    if not loss.requires_grad:
        return graph
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                node.grad += g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return graph
