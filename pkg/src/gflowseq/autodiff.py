"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A ``Tape`` records every derived node in creation order, which is a
topological order of the computation graph; ``backward`` walks the list in
reverse. Supported shapes are scalars (0-d), vectors and matrices; the only
broadcasting is scalar-with-anything. All arithmetic is float64 because the
balance losses live in log space and amplify rounding.

Independent tapes are independent objects and may be used concurrently;
a single tape is single-threaded.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeMismatchError(ValueError):
    pass


def _as_value(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Node:
    """One value in the graph, with its adjoint and local backward rule."""

    __slots__ = ("value", "grad", "parents", "pull", "name", "tape", "is_const")

    # keep numpy from absorbing Node operands into object arrays
    __array_ufunc__ = None

    def __init__(self, value: np.ndarray, parents: tuple["Node", ...],
                 pull: Callable[["Node"], None] | None, tape: "Tape",
                 name: str | None = None, is_const: bool = False):
        self.value = value
        self.grad: np.ndarray | None = None
        self.parents = parents
        self.pull = pull
        self.tape = tape
        self.name = name
        self.is_const = is_const

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def _acc(self, g) -> None:
        if self.is_const:
            return
        if self.shape == () and np.ndim(g) != 0:
            g = g.sum()
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        if not isinstance(other, Node):
            return add(self, -_as_value(other))
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, scalar):
        return mul(self, 1.0 / float(scalar))

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Node(shape={self.shape}{tag})"


class Tape:
    """Recorded forward pass: derived nodes in topological (creation) order."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def leaf(self, value, name: str | None = None) -> Node:
        """Differentiable input (parameters); gradients accumulate on it."""
        return Node(_as_value(value), (), None, self, name=name)

    def constant(self, value) -> Node:
        """Non-differentiable input; backward skips it."""
        return Node(_as_value(value), (), None, self, is_const=True)

    def _push(self, value: np.ndarray, parents: tuple[Node, ...],
              pull: Callable[[Node], None]) -> Node:
        node = Node(value, parents, pull, self)
        self.nodes.append(node)
        return node

    def backward(self, out: Node) -> None:
        """Populate adjoints of everything the scalar ``out`` depends on."""
        if out.value.shape != ():
            raise ValueError(f"backward needs a scalar output, got shape {out.value.shape}")
        if out.tape is not self:
            raise ValueError("output node does not belong to this tape")
        out._acc(np.ones(()))
        stop = len(self.nodes)
        while stop > 0 and self.nodes[stop - 1] is not out:
            stop -= 1
        for i in range(stop - 1, -1, -1):
            node = self.nodes[i]
            if node.grad is not None:
                node.pull(node)

    def gradients(self, leaves: dict[str, Node]) -> dict[str, np.ndarray]:
        return {
            name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value))
            for name, leaf in leaves.items()
        }


def _lift(x, like: Node) -> Node:
    if isinstance(x, Node):
        return x
    return Node(_as_value(x), (), None, like.tape, is_const=True)


def _binary_operands(a, b, op: str) -> tuple[Node, Node]:
    if isinstance(a, Node):
        b = _lift(b, a)
    elif isinstance(b, Node):
        a = _lift(a, b)
    else:
        raise TypeError(f"{op} needs at least one Node operand")
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ShapeMismatchError(f"{op}: incompatible shapes {a.shape} and {b.shape}")
    return a, b


def add(a, b) -> Node:
    a, b = _binary_operands(a, b, "add")
    value = a.value + b.value

    def pull(node: Node) -> None:
        a._acc(node.grad)
        b._acc(node.grad)

    return a.tape._push(value, (a, b), pull)


def mul(a, b) -> Node:
    a, b = _binary_operands(a, b, "mul")
    value = a.value * b.value

    def pull(node: Node) -> None:
        a._acc(node.grad * b.value)
        b._acc(node.grad * a.value)

    return a.tape._push(value, (a, b), pull)


def matmul(a: Node, b: Node) -> Node:
    av, bv = a.value, b.value
    if av.ndim == 0 or bv.ndim == 0 or av.shape[-1] != bv.shape[0]:
        raise ShapeMismatchError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")
    value = av @ bv

    def pull(node: Node) -> None:
        g = node.grad
        if av.ndim == 1 and bv.ndim == 1:
            a._acc(g * bv)
            b._acc(g * av)
        elif av.ndim == 1 and bv.ndim == 2:
            a._acc(bv @ g)
            b._acc(np.outer(av, g))
        elif av.ndim == 2 and bv.ndim == 1:
            a._acc(np.outer(g, bv))
            b._acc(av.T @ g)
        else:
            a._acc(g @ bv.T)
            b._acc(av.T @ g)

    return a.tape._push(value, (a, b), pull)


def tanh(a: Node) -> Node:
    value = np.tanh(a.value)

    def pull(node: Node) -> None:
        a._acc(node.grad * (1.0 - value * value))

    return a.tape._push(value, (a,), pull)


def relu(a: Node) -> Node:
    value = np.maximum(a.value, 0.0)

    def pull(node: Node) -> None:
        a._acc(node.grad * (a.value > 0.0))

    return a.tape._push(value, (a,), pull)


def exp(a: Node) -> Node:
    value = np.exp(a.value)

    def pull(node: Node) -> None:
        a._acc(node.grad * value)

    return a.tape._push(value, (a,), pull)


def log(a: Node) -> Node:
    value = np.log(a.value)

    def pull(node: Node) -> None:
        a._acc(node.grad / a.value)

    return a.tape._push(value, (a,), pull)


def square(a: Node) -> Node:
    value = a.value * a.value

    def pull(node: Node) -> None:
        a._acc(node.grad * 2.0 * a.value)

    return a.tape._push(value, (a,), pull)


def log_softmax(a: Node) -> Node:
    """Max-subtracted log-softmax over a vector; finite for inputs up to ~1e6."""
    if a.value.ndim != 1:
        raise ShapeMismatchError(f"log_softmax expects a vector, got shape {a.shape}")
    shifted = a.value - a.value.max()
    value = shifted - np.log(np.exp(shifted).sum())

    def pull(node: Node) -> None:
        g = node.grad
        a._acc(g - np.exp(value) * g.sum())

    return a.tape._push(value, (a,), pull)


def gather(a: Node, index) -> Node:
    """Select a matrix row, a vector element, or a vector subset by index."""
    if a.value.ndim == 2 and np.ndim(index) == 0:
        i = int(index)
        value = a.value[i].copy()

        def pull(node: Node) -> None:
            g = np.zeros_like(a.value)
            g[i] = node.grad
            a._acc(g)

        return a.tape._push(value, (a,), pull)
    if a.value.ndim == 1:
        if np.ndim(index) == 0:
            i = int(index)
            value = _as_value(a.value[i])

            def pull(node: Node) -> None:
                g = np.zeros_like(a.value)
                g[i] = node.grad
                a._acc(g)

            return a.tape._push(value, (a,), pull)
        idx = np.asarray(index, dtype=np.intp)
        value = a.value[idx].copy()

        def pull(node: Node) -> None:
            g = np.zeros_like(a.value)
            np.add.at(g, idx, node.grad)
            a._acc(g)

        return a.tape._push(value, (a,), pull)
    raise ShapeMismatchError(f"gather: unsupported operand shape {a.shape}")


def total(a: Node) -> Node:
    """Sum of all entries, as a scalar node."""
    value = _as_value(a.value.sum())

    def pull(node: Node) -> None:
        a._acc(np.full_like(a.value, float(node.grad)))

    return a.tape._push(value, (a,), pull)


def mean(a: Node) -> Node:
    n = a.value.size
    value = _as_value(a.value.sum() / n)

    def pull(node: Node) -> None:
        a._acc(np.full_like(a.value, float(node.grad) / n))

    return a.tape._push(value, (a,), pull)


def nsum(nodes: Sequence[Node]) -> Node:
    """Sum of scalar nodes as one wide fan-in node (cheap for long lists)."""
    if not nodes:
        raise ValueError("nsum of no nodes")
    for n in nodes:
        if n.value.shape != ():
            raise ShapeMismatchError("nsum expects scalar nodes")
    value = _as_value(sum(float(n.value) for n in nodes))

    def pull(node: Node) -> None:
        for p in nodes:
            p._acc(node.grad)

    return nodes[0].tape._push(value, tuple(nodes), pull)


def nmean(nodes: Sequence[Node]) -> Node:
    return mul(nsum(nodes), 1.0 / len(nodes))
