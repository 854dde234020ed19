"""Minimal reverse-mode autodiff on float64 numpy arrays.

The graph is a tape of `Node` objects rebuilt on every training step.
Graphs stay small (a few hundred nodes), so nothing is retained or fused.
Gradients accumulate, so a subgraph evaluated twice contributes twice.

Broadcasting is deliberately restricted: elementwise ops accept equal
shapes, a scalar `()` operand, a row vector `(k,)` against `(B, k)`, or a
column `(B, 1)` against `(B, k)`. Anything else raises `ShapeError`.
"""

from __future__ import annotations

import numpy as np

# standard published SeLU constants
SELU_ALPHA = 1.6732632423543772
SELU_LAMBDA = 1.0507009873554805


class ShapeError(ValueError):
    """Operand shapes incompatible for an op."""

    def __init__(self, op: str, shapes):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        super().__init__(f"{op}: incompatible shapes {self.shapes}")


class NonFiniteError(FloatingPointError):
    """A tensor that must be finite contains NaN or Inf."""

    def __init__(self, where: str, detail: str = ""):
        self.where = where
        msg = f"non-finite values in {where}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class Node:
    """One tape entry: a value, its parents, and per-parent vjp closures."""

    __slots__ = ("value", "parents", "vjps", "grad", "op")

    def __init__(self, value, parents=(), vjps=(), op="leaf"):
        self.value = value
        self.parents = parents
        self.vjps = vjps
        self.grad = None
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.value.shape})"


def leaf(value, check_finite: bool = True) -> Node:
    """Wrap an array as a graph leaf (parameter or constant)."""
    arr = np.asarray(value, dtype=np.float64)
    if check_finite and not np.all(np.isfinite(arr)):
        raise NonFiniteError("leaf tensor")
    return Node(arr)


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if grad.shape == shape:
        return grad
    if shape == ():
        return np.asarray(grad.sum())
    if len(shape) == 1 and grad.ndim == 2 and grad.shape[1] == shape[0]:
        return grad.sum(axis=0)
    if len(shape) == 2 and shape[1] == 1 and grad.ndim == 2 and grad.shape[0] == shape[0]:
        return grad.sum(axis=1, keepdims=True)
    raise AssertionError(f"cannot reduce grad {grad.shape} to {shape}")


def _broadcast_ok(a: tuple, b: tuple) -> bool:
    if a == b or a == () or b == ():
        return True
    pairs = ((a, b), (b, a))
    for big, small in pairs:
        if len(big) == 2 and len(small) == 1 and big[1] == small[0]:
            return True
        if len(big) == 2 and len(small) == 2 and small == (big[0], 1):
            return True
    return False


def _check_elementwise(op: str, a: Node, b: Node):
    if not _broadcast_ok(a.value.shape, b.value.shape):
        raise ShapeError(op, [a.value.shape, b.value.shape])


def add(a: Node, b: Node) -> Node:
    _check_elementwise("add", a, b)
    out = a.value + b.value
    return Node(out, (a, b),
                (lambda g: _reduce_to(g, a.value.shape),
                 lambda g: _reduce_to(g, b.value.shape)), "add")


def sub(a: Node, b: Node) -> Node:
    _check_elementwise("subtract", a, b)
    out = a.value - b.value
    return Node(out, (a, b),
                (lambda g: _reduce_to(g, a.value.shape),
                 lambda g: _reduce_to(-g, b.value.shape)), "subtract")


def mul(a: Node, b: Node) -> Node:
    _check_elementwise("elementwise-multiply", a, b)
    out = a.value * b.value
    return Node(out, (a, b),
                (lambda g: _reduce_to(g * b.value, a.value.shape),
                 lambda g: _reduce_to(g * a.value, b.value.shape)), "elementwise-multiply")


def smul(a: Node, c: float) -> Node:
    c = float(c)
    return Node(a.value * c, (a,), (lambda g: g * c,), "scalar-multiply")


def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ShapeError("matrix-multiply", [a.value.shape, b.value.shape])
    out = a.value @ b.value
    return Node(out, (a, b),
                (lambda g: g @ b.value.T,
                 lambda g: a.value.T @ g), "matrix-multiply")


def concat(nodes, axis: int = 1) -> Node:
    nodes = list(nodes)
    shapes = [n.value.shape for n in nodes]
    try:
        out = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError:
        raise ShapeError("concatenate", shapes) from None
    sizes = [s[axis] for s in shapes]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]
        if axis == 0:
            return lambda g: g[lo:hi]
        return lambda g: g[:, lo:hi]

    return Node(out, tuple(nodes), tuple(make_vjp(i) for i in range(len(nodes))),
                "concatenate")


def selu(a: Node) -> Node:
    x = a.value
    pos = x > 0
    ex = np.exp(np.minimum(x, 0.0))
    out = SELU_LAMBDA * np.where(pos, x, SELU_ALPHA * (ex - 1.0))
    dx = SELU_LAMBDA * np.where(pos, 1.0, SELU_ALPHA * ex)
    return Node(out, (a,), (lambda g: g * dx,), "SeLU")


def exp(a: Node) -> Node:
    out = np.exp(a.value)
    return Node(out, (a,), (lambda g: g * out,), "exponential")


def square(a: Node) -> Node:
    return Node(a.value * a.value, (a,), (lambda g: 2.0 * g * a.value,), "square")


def reciprocal(a: Node) -> Node:
    out = 1.0 / a.value
    return Node(out, (a,), (lambda g: -g * out * out,), "reciprocal")


def reduce_sum(a: Node, axis=None, keepdims: bool = False) -> Node:
    out = np.sum(a.value, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.value.shape).copy()
        gx = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gx, a.value.shape).copy()

    return Node(np.asarray(out), (a,), (vjp,), "sum")


def reduce_mean(a: Node, axis=None, keepdims: bool = False) -> Node:
    n = a.value.size if axis is None else a.value.shape[axis]
    out = np.mean(a.value, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g / n, a.value.shape).copy()
        gx = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gx / n, a.value.shape).copy()

    return Node(np.asarray(out), (a,), (vjp,), "mean")


def sqnorm(a: Node) -> Node:
    """Squared L2 norm over all elements (scalar output)."""
    out = np.asarray(np.sum(a.value * a.value))
    return Node(out, (a,), (lambda g: 2.0 * g * a.value,), "squared-L2-norm")


def maxc(a: Node, c: float) -> Node:
    """Elementwise max(x, c). Ties take the variable branch (subgradient 1)."""
    c = float(c)
    mask = (a.value >= c).astype(np.float64)
    return Node(np.maximum(a.value, c), (a,), (lambda g: g * mask,),
                "maximum-with-constant")


_OPS = {
    "add": add,
    "subtract": sub,
    "elementwise-multiply": mul,
    "scalar-multiply": smul,
    "matrix-multiply": matmul,
    "concatenate": concat,
    "SeLU": selu,
    "exponential": exp,
    "square": square,
    "sum": reduce_sum,
    "mean": reduce_mean,
    "squared-L2-norm": sqnorm,
    "maximum-with-constant": maxc,
    "reciprocal": reciprocal,
}


def forward(kind: str, operands, **attrs) -> Node:
    """Generic dispatch: build the node for `kind` over `operands`."""
    if kind not in _OPS:
        raise ValueError(f"unknown op-kind: {kind!r}")
    fn = _OPS[kind]
    if kind == "concatenate":
        return fn(operands, **attrs)
    return fn(*operands, **attrs)


def op_kinds():
    return list(_OPS)


def _topo(root: Node):
    """Deterministic post-order over the DAG reachable from root."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node, leaves=None) -> dict:
    """Backpropagate from a scalar root.

    Returns a map ``id(leaf) -> gradient`` for the requested leaves;
    leaves not reachable from the root get zeros. Every node in the graph
    also gets its ``grad`` attribute set.
    """
    if root.value.shape != ():
        raise ShapeError("backward", [root.value.shape])
    order = _topo(root)
    for n in order:
        n.grad = None
    root.grad = np.asarray(1.0)
    for node in reversed(order):
        if node.grad is None:
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            g = vjp(node.grad)
            if parent.grad is None:
                parent.grad = g
            else:
                parent.grad = parent.grad + g
    if leaves is None:
        return {}
    out = {}
    for lf in leaves:
        g = lf.grad if lf.grad is not None else np.zeros_like(lf.value)
        out[id(lf)] = np.asarray(g, dtype=np.float64)
    return out


def finite_diff_check(f, point: np.ndarray, step: float = 1e-5) -> float:
    """Max relative disagreement between analytic and central-difference grads.

    `f` maps a flat parameter vector to ``(scalar value, gradient vector)``.
    Returns ``max_i |analytic_i - central_i| / (|analytic_i| + 1e-8)``.
    """
    point = np.asarray(point, dtype=np.float64)
    _, analytic = f(point)
    analytic = np.asarray(analytic, dtype=np.float64)
    worst = 0.0
    for i in range(point.size):
        d = np.zeros_like(point)
        d[i] = step
        fp, _ = f(point + d)
        fm, _ = f(point - d)
        central = (float(fp) - float(fm)) / (2.0 * step)
        err = abs(analytic[i] - central) / (abs(analytic[i]) + 1e-8)
        worst = max(worst, err)
    return worst
