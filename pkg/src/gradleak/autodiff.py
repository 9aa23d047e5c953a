"""Reverse-mode automatic differentiation over dense float64 tensors.

The engine records an eager computation graph of :class:`Node` objects.
Derivative rules are written in terms of the same graph primitives, so a
backward pass can itself be recorded (``create_graph=True``) and then
differentiated again.  This double-backward capability is what lets an
attack loss depend on a model gradient and still be optimized by gradient
descent.

Broadcasting is deliberately restricted to scalar-vs-tensor; everything
else (bias addition, row reductions) is expressed through explicit
``matmul`` with constant one-matrices, which keeps every derivative rule
exact to arbitrary order.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np


class GraphError(ValueError):
    """Shape mismatch, cross-graph operand, or invalid backward request."""


class Graph:
    """Append-only node store; node ids double as the topological order."""

    __slots__ = ("nodes", "_recording")

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._recording = True

    def _append(self, values: np.ndarray, op: str, parents: tuple, meta,
                requires_grad: bool) -> "Node":
        if not self._recording:
            parents = ()
            requires_grad = False
        node = Node(self, len(self.nodes), values, op, parents, meta, requires_grad)
        self.nodes.append(node)
        return node

    def leaf(self, values, requires_grad: bool = False, copy: bool = True) -> "Node":
        if copy:
            arr = np.array(values, dtype=np.float64, copy=True, order="C")
        else:
            arr = np.asarray(values, dtype=np.float64)
            if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
                arr = np.ascontiguousarray(arr)
        return self._append(arr, "leaf", (), None, requires_grad)

    def constant(self, values) -> "Node":
        return self.leaf(values, requires_grad=False, copy=False)

    @contextmanager
    def no_record(self):
        prev = self._recording
        self._recording = False
        try:
            yield self
        finally:
            self._recording = prev


class Node:
    """One tensor value in a :class:`Graph`.

    Leaves have no parents; interior nodes remember the primitive and the
    parent nodes that produced them.  Values are computed eagerly and never
    mutated afterwards.
    """

    __slots__ = ("graph", "id", "values", "op", "parents", "meta", "requires_grad")

    def __init__(self, graph, node_id, values, op, parents, meta, requires_grad):
        self.graph = graph
        self.id = node_id
        self.values = values
        self.op = op
        self.parents = parents
        self.meta = meta
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        return float(self.values)

    def detach(self) -> "Node":
        return self.graph.leaf(self.values, requires_grad=False, copy=False)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, key):
        return narrow(self, key)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def reshape(self, shape):
        return reshape(self, shape)

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, shape={self.values.shape})"


# ---------------------------------------------------------------------------
# primitive construction helpers

def _as_node(x, graph: Graph) -> Node:
    if isinstance(x, Node):
        if x.graph is not graph:
            raise GraphError("operands belong to different graphs")
        return x
    return graph.constant(np.asarray(x, dtype=np.float64))


def _pair(a, b) -> tuple[Node, Node]:
    if isinstance(a, Node):
        return a, _as_node(b, a.graph)
    if isinstance(b, Node):
        return _as_node(a, b.graph), b
    raise GraphError("at least one operand must be a Node")


def _check_elementwise(a: Node, b: Node, op: str) -> None:
    sa, sb = a.values.shape, b.values.shape
    if sa != sb and sa != () and sb != ():
        raise GraphError(f"{op}: shapes {sa} and {sb} do not conform "
                         "(only scalar-vs-tensor broadcast is supported)")


def _binary(op: str, a, b, fn) -> Node:
    a, b = _pair(a, b)
    _check_elementwise(a, b, op)
    req = a.requires_grad or b.requires_grad
    return a.graph._append(fn(a.values, b.values), op, (a, b), None, req)


def add(a, b) -> Node:
    return _binary("add", a, b, np.add)


def sub(a, b) -> Node:
    return _binary("sub", a, b, np.subtract)


def mul(a, b) -> Node:
    return _binary("mul", a, b, np.multiply)


def _safe_divide(x, y):
    # division by zero propagates non-finite values; downstream checks catch them
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.divide(x, y)


def div(a, b) -> Node:
    return _binary("div", a, b, _safe_divide)


def matmul(a, b) -> Node:
    a, b = _pair(a, b)
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise GraphError("matmul expects 2-D operands")
    if a.values.shape[1] != b.values.shape[0]:
        raise GraphError(f"matmul: inner dimensions differ "
                         f"({a.values.shape} @ {b.values.shape})")
    req = a.requires_grad or b.requires_grad
    return a.graph._append(a.values @ b.values, "matmul", (a, b), None, req)


def _unary(op: str, a: Node, fn, meta=None) -> Node:
    return a.graph._append(fn(a.values), op, (a,), meta, a.requires_grad)


def exp(a: Node) -> Node:
    return _unary("exp", a, np.exp)


def log(a: Node) -> Node:
    return _unary("log", a, np.log)


def tanh(a: Node) -> Node:
    return _unary("tanh", a, np.tanh)


def abs_(a: Node) -> Node:
    return _unary("abs", a, np.abs)


def sqrt(a: Node) -> Node:
    return _unary("sqrt", a, np.sqrt)


def square(a: Node) -> Node:
    return _unary("square", a, np.square)


def clamp(a: Node, lo: float, hi: float) -> Node:
    return _unary("clamp", a, lambda v: np.clip(v, lo, hi), meta=(float(lo), float(hi)))


def sum_all(a: Node) -> Node:
    return a.graph._append(np.sum(a.values).reshape(()), "sum", (a,), None,
                           a.requires_grad)


def mean_all(a: Node) -> Node:
    return a.graph._append(np.mean(a.values).reshape(()), "mean", (a,),
                           a.values.size, a.requires_grad)


def reshape(a: Node, shape) -> Node:
    new = np.reshape(a.values, shape)
    return a.graph._append(new, "reshape", (a,), None, a.requires_grad)


def transpose(a: Node, axes: Sequence[int] | None = None) -> Node:
    if axes is None:
        axes = tuple(range(a.values.ndim))[::-1]
    axes = tuple(int(x) for x in axes)
    return a.graph._append(np.ascontiguousarray(np.transpose(a.values, axes)),
                           "transpose", (a,), axes, a.requires_grad)


def narrow(a: Node, key) -> Node:
    """Basic slicing (the `slice` primitive); backward scatters into zeros."""
    out = np.ascontiguousarray(a.values[key])
    return a.graph._append(out, "slice", (a,), (key, a.values.shape),
                           a.requires_grad)


def unslice(v: Node, key, target_shape) -> Node:
    """Adjoint of `narrow`: place v into a zero tensor of target_shape."""
    out = np.zeros(target_shape)
    out[key] = v.values
    return v.graph._append(out, "unslice", (v,), (key, tuple(target_shape)),
                           v.requires_grad)


def concat(parts: Sequence[Node], axis: int = 0) -> Node:
    parts = list(parts)
    if not parts:
        raise GraphError("concat of zero parts")
    graph = parts[0].graph
    for p in parts:
        if p.graph is not graph:
            raise GraphError("operands belong to different graphs")
    out = np.concatenate([p.values for p in parts], axis=axis)
    req = any(p.requires_grad for p in parts)
    return graph._append(out, "concat", tuple(parts), axis, req)


def take(a: Node, flat_indices: np.ndarray) -> Node:
    """Gather from the flattened tensor; the engine's im2col workhorse."""
    idx = np.asarray(flat_indices, dtype=np.intp)
    out = a.values.reshape(-1)[idx]
    return a.graph._append(out, "take", (a,), (idx, a.values.shape),
                           a.requires_grad)


def put(v: Node, flat_indices: np.ndarray, target_shape) -> Node:
    """Adjoint of `take`: scatter-add v into a zero tensor of target_shape."""
    idx = np.asarray(flat_indices, dtype=np.intp)
    out = np.zeros(int(np.prod(target_shape)))
    np.add.at(out, idx.reshape(-1), v.values.reshape(-1))
    out = out.reshape(target_shape)
    return v.graph._append(out, "put", (v,), (idx, tuple(target_shape)),
                           v.requires_grad)


# ---------------------------------------------------------------------------
# derivative rules
#
# Each rule receives the forward node and its incoming gradient node and
# returns one gradient node (or None) per parent.  Rules are built from the
# primitives above, so recording them yields a differentiable graph.

_VJP: dict[str, Callable] = {}


def _rule(name):
    def deco(fn):
        _VJP[name] = fn
        return fn
    return deco


def _reduce_to(g: Node, parent: Node) -> Node:
    # only scalar-vs-tensor broadcast exists, so the reduction is all-or-nothing
    if parent.values.shape == g.values.shape:
        return g
    return sum_all(g)


@_rule("add")
def _vjp_add(node, g):
    a, b = node.parents
    return _reduce_to(g, a), _reduce_to(g, b)


@_rule("sub")
def _vjp_sub(node, g):
    a, b = node.parents
    return _reduce_to(g, a), _reduce_to(mul(g, -1.0), b)


@_rule("mul")
def _vjp_mul(node, g):
    a, b = node.parents
    ga = _reduce_to(mul(g, b), a) if a.requires_grad else None
    gb = _reduce_to(mul(g, a), b) if b.requires_grad else None
    return ga, gb


@_rule("div")
def _vjp_div(node, g):
    a, b = node.parents
    ga = _reduce_to(div(g, b), a) if a.requires_grad else None
    gb = None
    if b.requires_grad:
        gb = _reduce_to(mul(div(mul(g, a), mul(b, b)), -1.0), b)
    return ga, gb


@_rule("matmul")
def _vjp_matmul(node, g):
    a, b = node.parents
    ga = matmul(g, transpose(b)) if a.requires_grad else None
    gb = matmul(transpose(a), g) if b.requires_grad else None
    return ga, gb


@_rule("sum")
def _vjp_sum(node, g):
    (a,) = node.parents
    return (mul(g, a.graph.constant(np.ones(a.values.shape))),)


@_rule("mean")
def _vjp_mean(node, g):
    (a,) = node.parents
    scale = mul(g, 1.0 / node.meta)
    return (mul(scale, a.graph.constant(np.ones(a.values.shape))),)


@_rule("exp")
def _vjp_exp(node, g):
    return (mul(g, node),)


@_rule("log")
def _vjp_log(node, g):
    (a,) = node.parents
    return (div(g, a),)


@_rule("tanh")
def _vjp_tanh(node, g):
    return (mul(g, sub(1.0, square(node))),)


@_rule("abs")
def _vjp_abs(node, g):
    (a,) = node.parents
    sign = a.graph.constant(np.sign(a.values))
    return (mul(g, sign),)


@_rule("sqrt")
def _vjp_sqrt(node, g):
    return (div(g, mul(node, 2.0)),)


@_rule("square")
def _vjp_square(node, g):
    (a,) = node.parents
    return (mul(g, mul(a, 2.0)),)


@_rule("clamp")
def _vjp_clamp(node, g):
    # subgradient 1 strictly inside the interval, 0 at or outside the bounds
    (a,) = node.parents
    lo, hi = node.meta
    mask = ((a.values > lo) & (a.values < hi)).astype(np.float64)
    return (mul(g, a.graph.constant(mask)),)


@_rule("reshape")
def _vjp_reshape(node, g):
    (a,) = node.parents
    return (reshape(g, a.values.shape),)


@_rule("transpose")
def _vjp_transpose(node, g):
    axes = node.meta
    inverse = tuple(np.argsort(axes))
    return (transpose(g, inverse),)


@_rule("slice")
def _vjp_slice(node, g):
    key, parent_shape = node.meta
    return (unslice(g, key, parent_shape),)


@_rule("unslice")
def _vjp_unslice(node, g):
    key, _ = node.meta
    return (narrow(g, key),)


@_rule("concat")
def _vjp_concat(node, g):
    axis = node.meta
    grads = []
    offset = 0
    for p in node.parents:
        size = p.values.shape[axis]
        key = tuple(slice(None) if d != axis else slice(offset, offset + size)
                    for d in range(p.values.ndim))
        grads.append(narrow(g, key) if p.requires_grad else None)
        offset += size
    return tuple(grads)


@_rule("take")
def _vjp_take(node, g):
    idx, parent_shape = node.meta
    return (put(g, idx, parent_shape),)


@_rule("put")
def _vjp_put(node, g):
    idx, _ = node.meta
    return (reshape(take(g, idx.reshape(-1)), node.parents[0].values.shape),)


# ---------------------------------------------------------------------------
# backward pass

def backward(root: Node, wrt: Iterable[Node], create_graph: bool = False
             ) -> dict[Node, Node]:
    """Gradients of a scalar root with respect to the given nodes.

    With ``create_graph=True`` every returned gradient is an interior node
    of the same graph and can be differentiated again; with ``False`` the
    gradients are constants.  Nodes outside the root's ancestry receive an
    exactly-zero gradient of their own shape.
    """
    graph = root.graph
    if root.values.shape != ():
        raise GraphError("backward root must be scalar-shaped")
    wrt = list(wrt)
    for w in wrt:
        if w.graph is not graph:
            raise GraphError("wrt node belongs to a different graph")
        if not w.requires_grad:
            raise GraphError("wrt node does not require gradients")

    def zeros_for(w):
        return graph.leaf(np.zeros(w.values.shape), copy=False)

    if not root.requires_grad:
        return {w: zeros_for(w) for w in wrt}

    # ancestry of root restricted to the differentiable subgraph
    ancestry: set[int] = set()
    stack = [root]
    while stack:
        node = stack.pop()
        if node.id in ancestry:
            continue
        ancestry.add(node.id)
        for p in node.parents:
            if p.requires_grad and p.id not in ancestry:
                stack.append(p)

    # keep only nodes that can actually reach a requested leaf
    wrt_ids = {w.id for w in wrt}
    useful: set[int] = set()
    for nid in sorted(ancestry):
        node = graph.nodes[nid]
        if nid in wrt_ids or any(p.id in useful for p in node.parents):
            useful.add(nid)
    if root.id not in useful:
        return {w: zeros_for(w) for w in wrt}

    grad_of: dict[int, Node] = {}

    def run_sweep():
        grad_of[root.id] = graph.constant(np.ones(()))
        for nid in sorted(ancestry & useful, reverse=True):
            node = graph.nodes[nid]
            g = grad_of.get(nid)
            if g is None or not node.parents:
                continue
            contribs = _VJP[node.op](node, g)
            for parent, contrib in zip(node.parents, contribs):
                if contrib is None or not parent.requires_grad:
                    continue
                if parent.id not in useful:
                    continue
                held = grad_of.get(parent.id)
                grad_of[parent.id] = contrib if held is None else add(held, contrib)

    if create_graph:
        run_sweep()
    else:
        with graph.no_record():
            run_sweep()

    return {w: grad_of.get(w.id) or zeros_for(w) for w in wrt}
