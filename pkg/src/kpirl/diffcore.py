"""Reverse-mode automatic differentiation on a recorded tape.

Values are computed eagerly when a node is recorded.  ``gradient`` does not
return numbers: it appends the backward computation to the same graph as
ordinary nodes, so its results can be differentiated again.  This is what
lets the IRL outer loop differentiate through an unrolled gradient-descent
inner loop.

Example
-------
>>> g = Graph()
>>> x = g.variable([2.0])
>>> y = g.sum(x * x * x)
>>> (dx,) = gradient(y, [x])
>>> (ddx,) = gradient(g.sum(dx), [x])
>>> float(ddx.value[0])
12.0
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Graph",
    "Node",
    "ShapeError",
    "as_tensor",
    "gradient",
    "finite_difference_check",
    "relative_error",
]


class ShapeError(ValueError):
    """Parent shapes are incompatible with the requested primitive."""


def as_tensor(value) -> np.ndarray:
    """Return a float64 array copy of ``value``; reject NaN/Inf."""
    arr = np.array(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor values must be finite")
    return arr


class Node:
    __slots__ = ("graph", "id", "op", "parents", "value", "requires_grad", "attrs")

    def __init__(self, graph, id_, op, parents, value, requires_grad, attrs):
        self.graph = graph
        self.id = id_
        self.op = op
        self.parents = parents
        self.value = value
        self.requires_grad = requires_grad
        self.attrs = attrs

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, shape={self.shape})"

    def _wrap(self, other):
        if isinstance(other, Node):
            return other
        return self.graph.constant(np.broadcast_to(as_tensor(other), self.shape))

    def __add__(self, other):
        return self.graph.add(self, self._wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return self.graph.sub(self, self._wrap(other))

    def __rsub__(self, other):
        return self.graph.sub(self._wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return self.graph.scale(self, other)
        return self.graph.mul(self, self._wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return self.graph.scale(self, -1.0)

    def __matmul__(self, other):
        other = self._wrap(other) if not isinstance(other, Node) else other
        if other.value.ndim == 1 and self.value.ndim == 2:
            return self.graph.matvec(self, other)
        return self.graph.matmul(self, other)

    def __getitem__(self, key):
        return self.graph.slice(self, key)


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


class Graph:
    """An append-only tape of nodes in topological order.

    A graph is owned by one caller; build a fresh graph per independent
    computation.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.variables: list[Node] = []
        self._cache: dict = {}

    def __len__(self):
        return len(self.nodes)

    def _record(self, op, parents, value, attrs=None, differentiable=True):
        requires = differentiable and any(p.requires_grad for p in parents)
        node = Node(self, len(self.nodes), op, parents, value, requires, attrs)
        self.nodes.append(node)
        return node

    # leaves

    def variable(self, value) -> Node:
        node = Node(self, len(self.nodes), "variable", (), as_tensor(value), True, None)
        self.nodes.append(node)
        self.variables.append(node)
        return node

    def constant(self, value) -> Node:
        node = Node(self, len(self.nodes), "constant", (), as_tensor(value), False, None)
        self.nodes.append(node)
        return node

    def zeros(self, shape) -> Node:
        return self.constant(np.zeros(shape))

    # primitives

    def add(self, a, b):
        _same_shape("add", a, b)
        return self._record("add", (a, b), a.value + b.value)

    def sub(self, a, b):
        _same_shape("sub", a, b)
        return self._record("sub", (a, b), a.value - b.value)

    def mul(self, a, b):
        _same_shape("mul", a, b)
        return self._record("mul", (a, b), a.value * b.value)

    def scale(self, a, c: float):
        """Multiply by a fixed real number."""
        c = float(c)
        return self._record("scale", (a,), a.value * c, c)

    def smul(self, s, a):
        """Multiply tensor ``a`` by the single-element node ``s``."""
        if s.value.size != 1:
            raise ShapeError(f"smul: scalar operand has shape {s.shape}")
        return self._record("smul", (s, a), a.value * s.value.reshape(()))

    def square(self, a):
        return self._record("square", (a,), a.value * a.value)

    def exp(self, a):
        return self._record("exp", (a,), np.exp(a.value))

    def sin(self, a):
        return self._record("sin", (a,), np.sin(a.value))

    def cos(self, a):
        return self._record("cos", (a,), np.cos(a.value))

    def relu(self, a):
        return self._record("relu", (a,), np.maximum(a.value, 0.0))

    def step(self, a):
        """Heaviside indicator ``a > 0``; carries no derivative."""
        return self._record("step", (a,), (a.value > 0.0).astype(np.float64), differentiable=False)

    def sum(self, a):
        return self._record("sum", (a,), np.asarray(a.value.sum()))

    def dot(self, a, b):
        """Inner product of two equally shaped tensors (scalar result)."""
        _same_shape("dot", a, b)
        return self._record("dot", (a, b), np.asarray(np.vdot(a.value, b.value)))

    def matvec(self, m, v):
        if m.value.ndim != 2 or v.value.ndim != 1 or m.shape[1] != v.shape[0]:
            raise ShapeError(f"matvec: shapes {m.shape} and {v.shape} incompatible")
        return self._record("matvec", (m, v), m.value @ v.value)

    def matmul(self, a, b):
        if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} incompatible")
        return self._record("matmul", (a, b), a.value @ b.value)

    def outer(self, a, b):
        if a.value.ndim != 1 or b.value.ndim != 1:
            raise ShapeError(f"outer: shapes {a.shape} and {b.shape} must be 1-D")
        return self._record("outer", (a, b), np.outer(a.value, b.value))

    def transpose(self, a):
        if a.value.ndim != 2:
            raise ShapeError(f"transpose: shape {a.shape} is not 2-D")
        if not a.requires_grad:
            key = ("T", a.id)
            hit = self._cache.get(key)
            if hit is None:
                hit = self._cache[key] = self._record("transpose", (a,), np.ascontiguousarray(a.value.T))
            return hit
        return self._record("transpose", (a,), np.ascontiguousarray(a.value.T))

    def reshape(self, a, shape):
        shape = tuple(shape)
        if int(np.prod(shape)) != a.value.size:
            raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}")
        return self._record("reshape", (a,), a.value.reshape(shape), shape)

    def concat(self, parts: Sequence[Node], axis: int = 0):
        parts = tuple(parts)
        if not parts:
            raise ShapeError("concat: no operands")
        try:
            value = np.concatenate([p.value for p in parts], axis=axis)
        except ValueError as exc:
            shapes = [p.shape for p in parts]
            raise ShapeError(f"concat: shapes {shapes} incompatible on axis {axis}") from exc
        sizes = tuple(p.shape[axis] for p in parts)
        return self._record("concat", parts, value, (axis, sizes))

    def slice(self, a, key):
        try:
            value = np.array(a.value[key], dtype=np.float64)
        except IndexError as exc:
            raise ShapeError(f"slice: index {key!r} invalid for shape {a.shape}") from exc
        return self._record("slice", (a,), value, key)

    def scatter(self, a, key, shape):
        """Embed ``a`` at ``key`` inside zeros of ``shape`` (adjoint of slice)."""
        out = np.zeros(shape)
        out[key] += a.value
        return self._record("scatter", (a,), out, (key, tuple(shape)))


# vector-Jacobian products: (graph, node, upstream) -> tuple of parent adjoints


def _vjp_add(g, n, up):
    return up, up


def _vjp_sub(g, n, up):
    return up, g.scale(up, -1.0)


def _vjp_mul(g, n, up):
    a, b = n.parents
    return (g.mul(up, b) if a.requires_grad else None,
            g.mul(up, a) if b.requires_grad else None)


def _vjp_scale(g, n, up):
    return (g.scale(up, n.attrs),)


def _vjp_smul(g, n, up):
    s, a = n.parents
    ds = None
    if s.requires_grad:
        ds = g.dot(up, a)
        if s.shape != ():
            ds = g.reshape(ds, s.shape)
    return ds, (g.smul(s, up) if a.requires_grad else None)


def _vjp_square(g, n, up):
    return (g.scale(g.mul(up, n.parents[0]), 2.0),)


def _vjp_exp(g, n, up):
    return (g.mul(up, n),)


def _vjp_sin(g, n, up):
    return (g.mul(up, g.cos(n.parents[0])),)


def _vjp_cos(g, n, up):
    return (g.scale(g.mul(up, g.sin(n.parents[0])), -1.0),)


def _vjp_relu(g, n, up):
    return (g.mul(up, g.step(n.parents[0])),)


def _vjp_sum(g, n, up):
    a = n.parents[0]
    return (g.smul(up, g.constant(np.ones(a.shape))),)


def _vjp_dot(g, n, up):
    a, b = n.parents
    return (g.smul(up, b) if a.requires_grad else None,
            g.smul(up, a) if b.requires_grad else None)


def _vjp_matvec(g, n, up):
    m, v = n.parents
    return (g.outer(up, v) if m.requires_grad else None,
            g.matvec(g.transpose(m), up) if v.requires_grad else None)


def _vjp_outer(g, n, up):
    a, b = n.parents
    return (g.matvec(up, b) if a.requires_grad else None,
            g.matvec(g.transpose(up), a) if b.requires_grad else None)


def _vjp_matmul(g, n, up):
    a, b = n.parents
    return (g.matmul(up, g.transpose(b)) if a.requires_grad else None,
            g.matmul(g.transpose(a), up) if b.requires_grad else None)


def _vjp_transpose(g, n, up):
    return (g.transpose(up),)


def _vjp_reshape(g, n, up):
    return (g.reshape(up, n.parents[0].shape),)


def _vjp_concat(g, n, up):
    axis, sizes = n.attrs
    out = []
    start = 0
    ndim = up.value.ndim
    for p, size in zip(n.parents, sizes):
        if p.requires_grad:
            key = [slice(None)] * ndim
            key[axis] = slice(start, start + size)
            out.append(g.slice(up, tuple(key)))
        else:
            out.append(None)
        start += size
    return tuple(out)


def _vjp_slice(g, n, up):
    return (g.scatter(up, n.attrs, n.parents[0].shape),)


def _vjp_scatter(g, n, up):
    return (g.slice(up, n.attrs[0]),)


_VJP: dict[str, Callable] = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul": _vjp_mul,
    "scale": _vjp_scale,
    "smul": _vjp_smul,
    "square": _vjp_square,
    "exp": _vjp_exp,
    "sin": _vjp_sin,
    "cos": _vjp_cos,
    "relu": _vjp_relu,
    "sum": _vjp_sum,
    "dot": _vjp_dot,
    "matvec": _vjp_matvec,
    "outer": _vjp_outer,
    "matmul": _vjp_matmul,
    "transpose": _vjp_transpose,
    "reshape": _vjp_reshape,
    "concat": _vjp_concat,
    "slice": _vjp_slice,
    "scatter": _vjp_scatter,
}

PRIMITIVES = tuple(_VJP) + ("step",)


def gradient(output: Node, inputs: Sequence[Node]) -> list[Node]:
    """Return d(output)/d(input) for each input, as new nodes of the same graph.

    Inputs may be leaves or intermediate nodes.  An input the output does not
    depend on receives a zero constant.
    """
    if output.value.size != 1:
        raise ValueError(f"gradient: output must be scalar, got shape {output.shape}")
    g = output.graph
    inputs = list(inputs)
    for x in inputs:
        if x.graph is not g:
            raise ValueError("gradient: input belongs to a different graph")
    if not inputs:
        return []
    nodes = g.nodes
    lo = min(x.id for x in inputs)
    hi = output.id

    # nodes between the inputs and the output that depend on an input
    dep = bytearray(hi + 1)
    for x in inputs:
        if x.id <= hi:
            dep[x.id] = 1
    for i in range(lo + 1, hi + 1):
        n = nodes[i]
        if n.requires_grad and not dep[i]:
            for p in n.parents:
                if dep[p.id]:
                    dep[i] = 1
                    break

    wanted = {x.id for x in inputs}
    found: dict[int, Node] = {}
    if dep[hi]:
        adj: dict[int, Node] = {hi: g.constant(np.ones(output.shape))}
        for i in range(hi, lo - 1, -1):
            up = adj.pop(i, None)
            if up is None:
                continue
            if i in wanted:
                found[i] = up
            n = nodes[i]
            vjp = _VJP.get(n.op)
            if vjp is None:
                continue
            for p, pg in zip(n.parents, vjp(g, n, up)):
                if pg is None or not dep[p.id]:
                    continue
                prev = adj.get(p.id)
                adj[p.id] = pg if prev is None else g.add(prev, pg)
    return [found[x.id] if x.id in found else g.zeros(x.shape) for x in inputs]


def relative_error(a, b, floor: float = 1e-8) -> float:
    """Max componentwise ``|a-b| / max(|a|, |b|, floor)``."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def finite_difference_check(f: Callable[[Graph, Node], Node], x, epsilon: float = 1e-6) -> float:
    """Compare the autodiff gradient of ``f`` at ``x`` with central differences.

    ``f(graph, var)`` must record a scalar node.  Returns the maximum
    componentwise relative error.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    x = as_tensor(x)
    g = Graph()
    v = g.variable(x)
    (dx,) = gradient(f(g, v), [v])
    auto = dx.value

    def value_at(point):
        h = Graph()
        return float(f(h, h.constant(point)).value)

    numeric = np.zeros(x.size)
    flat = x.ravel()
    for i in range(x.size):
        plus = flat.copy()
        minus = flat.copy()
        plus[i] += epsilon
        minus[i] -= epsilon
        numeric[i] = (value_at(plus.reshape(x.shape)) - value_at(minus.reshape(x.shape))) / (2 * epsilon)
    return relative_error(auto, numeric)
