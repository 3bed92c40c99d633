"""Reverse-mode automatic differentiation on an explicit tape.

Every operation appends a :class:`Node` to a :class:`Tape`.  ``backward`` walks
the tape in reverse.  With ``build_graph=True`` the adjoint computations are
themselves recorded as nodes, so the returned gradients can be differentiated
again (gradient of a gradient).

The vector-Jacobian products below are written once against a tiny set of
dispatching helpers (``matmul``, ``mul``, ...).  Called with plain arrays they
run in numpy; called with nodes they record on the tape.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Node",
    "Tape",
    "TapeError",
    "ShapeError",
    "NonFiniteError",
    "backward",
    "finite_diff",
    "add",
    "sub",
    "scale",
    "mul",
    "matmul",
    "transpose",
    "relu",
    "sigmoid",
    "exp",
    "log_softmax",
    "total",
    "mean",
    "rowsum",
    "index_select",
]


class TapeError(ValueError):
    """Base class for tape failures."""


class ShapeError(TapeError):
    def __init__(self, op: str, shapes: Sequence[tuple[int, ...]], detail: str = ""):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        msg = f"{op}: incompatible shapes {self.shapes}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(TapeError):
    def __init__(self, op: str):
        self.op = op
        super().__init__(f"{op}: produced a non-finite value")


class Node:
    """A value recorded on a tape."""

    __slots__ = ("id", "op", "parents", "value", "grad", "tape", "attrs")

    def __init__(self, tape, id, op, parents, value, attrs):
        self.tape = tape
        self.id = id
        self.op = op
        self.parents = parents
        self.value = value
        self.attrs = attrs
        self.grad = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def T(self) -> Node:
        return transpose(self)

    def __repr__(self) -> str:
        return f"Node(id={self.id}, op={self.op!r}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


class Tape:
    """Ordered record of nodes.

    ``higher_order`` flips to True once a ``backward(..., build_graph=True)``
    has recorded adjoint nodes on this tape.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.higher_order = False

    def __len__(self) -> int:
        return len(self.nodes)

    def _append(self, op, parents, value, attrs) -> Node:
        node = Node(self, len(self.nodes), op, parents, value, attrs)
        self.nodes.append(node)
        return node

    def leaf(self, value) -> Node:
        """Record an input (parameter, feature matrix, perturbation)."""
        value = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError("leaf")
        return self._append("leaf", (), value, {})

    constant = leaf

    def owns(self, node: Node) -> bool:
        return node.tape is self and node.id < len(self.nodes) and self.nodes[node.id] is node

    def forward_op(self, op: str, inputs: Sequence[Node | np.ndarray], **attrs) -> Node:
        try:
            spec = _OPS[op]
        except KeyError:
            raise TapeError(f"unknown op {op!r}") from None
        nodes = []
        for x in inputs:
            if isinstance(x, Node):
                if x.tape is not self:
                    raise TapeError(f"{op}: input node belongs to another tape")
                nodes.append(x)
            else:
                nodes.append(self.constant(x))
        values = [n.value for n in nodes]
        if spec.check is not None:
            spec.check(op, values, attrs)
        value = spec.fn(*values, **attrs)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(op)
        return self._append(op, tuple(nodes), value, attrs)

    def replay(self) -> list[np.ndarray]:
        """Recompute every node from the recorded leaves, in tape order."""
        out: list[np.ndarray] = []
        for node in self.nodes:
            if node.op == "leaf":
                out.append(node.value.copy())
            else:
                args = [out[p.id] for p in node.parents]
                out.append(_OPS[node.op].fn(*args, **node.attrs))
        return out

    def backward(self, output: Node, wrt: Sequence[Node], build_graph: bool = False):
        return backward(self, output, wrt, build_graph)


# ---------------------------------------------------------------------------
# numpy kernels and shape checks


def _same_shape(op, values, attrs):
    if values[0].shape != values[1].shape:
        raise ShapeError(op, [v.shape for v in values], "elementwise ops need equal shapes")


def _check_matmul(op, values, attrs):
    a, b = values
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(op, [a.shape, b.shape], "inner dimensions differ")


def _check_matrix(op, values, attrs):
    if values[0].ndim != 2:
        raise ShapeError(op, [values[0].shape], "expected a matrix")


def _check_index(op, values, attrs):
    x = values[0]
    idx = attrs["index"]
    if x.ndim != 2 or idx.shape != (x.shape[0],):
        raise ShapeError(op, [x.shape, idx.shape], "need [n, k] values and [n] indices")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
        raise ShapeError(op, [x.shape, idx.shape], "index out of range")


def _check_scatter(op, values, attrs):
    g = values[0]
    n, _ = attrs["shape"]
    if g.shape != (n,):
        raise ShapeError(op, [g.shape, attrs["shape"]])


def _check_scalar(op, values, attrs):
    if values[0].shape != ():
        raise ShapeError(op, [values[0].shape], "expected a scalar")


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _log_softmax(x):
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _index_select(x, index):
    return x[np.arange(x.shape[0]), index]


def _scatter(g, index, shape):
    out = np.zeros(shape)
    out[np.arange(shape[0]), index] = g
    return out


def _pad_col(x, fill):
    return np.hstack([x, np.full((x.shape[0], 1), fill)])


# ---------------------------------------------------------------------------
# dispatching helpers: numpy on arrays, recorded ops on nodes


def _call(op: str, *args, **attrs):
    for a in args:
        if isinstance(a, Node):
            return a.tape.forward_op(op, args, **attrs)
    return _OPS[op].fn(*(np.asarray(a, dtype=np.float64) for a in args), **attrs)


def add(a, b):
    return _call("add", a, b)


def sub(a, b):
    return _call("sub", a, b)


def scale(a, c: float):
    return _call("scale", a, c=float(c))


def mul(a, b):
    return _call("mul", a, b)


def matmul(a, b):
    return _call("matmul", a, b)


def transpose(a):
    return _call("transpose", a)


def relu(a):
    return _call("relu", a)


def sigmoid(a):
    return _call("sigmoid", a)


def exp(a):
    return _call("exp", a)


def log_softmax(a):
    """Row-wise log-softmax of an ``[n, k]`` matrix."""
    return _call("log_softmax", a)


def total(a):
    """Sum of all entries, as a scalar."""
    return _call("sum", a)


def mean(a):
    return _call("mean", a)


def rowsum(a):
    return _call("rowsum", a)


def index_select(a, index):
    """Pick ``a[i, index[i]]`` for every row ``i``."""
    return _call("index_select", a, index=np.asarray(index, dtype=np.intp))


def expand(a, shape):
    return _call("expand", a, shape=tuple(shape))


def scatter(a, index, shape):
    return _call("scatter", a, index=index, shape=tuple(shape))


def pad_col(a, fill: float):
    """Append a constant column to a matrix."""
    return _call("pad_col", a, fill=float(fill))


def drop_col(a):
    """Remove the last column of a matrix."""
    return _call("drop_col", a)


# ---------------------------------------------------------------------------
# vector-Jacobian products.  Signature: vjp(g, out, inputs, needs, attrs).


def _vjp_add(g, out, inputs, needs, attrs):
    return g, g


def _vjp_sub(g, out, inputs, needs, attrs):
    return g, (scale(g, -1.0) if needs[1] else None)


def _vjp_scale(g, out, inputs, needs, attrs):
    return (scale(g, attrs["c"]),)


def _vjp_mul(g, out, inputs, needs, attrs):
    a, b = inputs
    return (mul(g, b) if needs[0] else None), (mul(g, a) if needs[1] else None)


def _vjp_matmul(g, out, inputs, needs, attrs):
    a, b = inputs
    ga = matmul(g, transpose(b)) if needs[0] else None
    gb = matmul(transpose(a), g) if needs[1] else None
    return ga, gb


def _vjp_transpose(g, out, inputs, needs, attrs):
    return (transpose(g),)


def _value(x):
    return x.value if isinstance(x, Node) else x


def _vjp_relu(g, out, inputs, needs, attrs):
    # subgradient at 0 is 0; the mask is locally constant so second derivative is 0
    mask = (_value(inputs[0]) > 0).astype(np.float64)
    return (mul(g, mask),)


def _vjp_sigmoid(g, out, inputs, needs, attrs):
    return (mul(g, sub(out, mul(out, out))),)


def _vjp_exp(g, out, inputs, needs, attrs):
    return (mul(g, out),)


def _vjp_log_softmax(g, out, inputs, needs, attrs):
    k = _value(out).shape[1]
    spread = matmul(rowsum(g), np.ones((1, k)))
    return (sub(g, mul(exp(out), spread)),)


def _vjp_sum(g, out, inputs, needs, attrs):
    return (expand(g, _value(inputs[0]).shape),)


def _vjp_mean(g, out, inputs, needs, attrs):
    shape = _value(inputs[0]).shape
    return (expand(scale(g, 1.0 / max(int(np.prod(shape)), 1)), shape),)


def _vjp_rowsum(g, out, inputs, needs, attrs):
    k = _value(inputs[0]).shape[1]
    return (matmul(g, np.ones((1, k))),)


def _vjp_index_select(g, out, inputs, needs, attrs):
    return (scatter(g, attrs["index"], _value(inputs[0]).shape),)


def _vjp_expand(g, out, inputs, needs, attrs):
    return (total(g),)


def _vjp_scatter(g, out, inputs, needs, attrs):
    return (index_select(g, attrs["index"]),)


def _vjp_pad_col(g, out, inputs, needs, attrs):
    return (drop_col(g),)


def _vjp_drop_col(g, out, inputs, needs, attrs):
    return (pad_col(g, 0.0),)


@dataclass(frozen=True)
class _OpSpec:
    fn: Callable
    vjp: Callable | None
    check: Callable | None = None


_OPS: dict[str, _OpSpec] = {
    "add": _OpSpec(np.add, _vjp_add, _same_shape),
    "sub": _OpSpec(np.subtract, _vjp_sub, _same_shape),
    "scale": _OpSpec(lambda x, c: x * c, _vjp_scale),
    "mul": _OpSpec(np.multiply, _vjp_mul, _same_shape),
    "matmul": _OpSpec(np.matmul, _vjp_matmul, _check_matmul),
    "transpose": _OpSpec(lambda x: np.ascontiguousarray(x.T), _vjp_transpose, _check_matrix),
    "relu": _OpSpec(lambda x: np.maximum(x, 0.0), _vjp_relu),
    "sigmoid": _OpSpec(_sigmoid, _vjp_sigmoid),
    "exp": _OpSpec(np.exp, _vjp_exp),
    "log_softmax": _OpSpec(_log_softmax, _vjp_log_softmax, _check_matrix),
    "sum": _OpSpec(lambda x: np.asarray(x.sum()), _vjp_sum),
    "mean": _OpSpec(lambda x: np.asarray(x.mean()), _vjp_mean),
    "rowsum": _OpSpec(lambda x: x.sum(axis=1, keepdims=True), _vjp_rowsum, _check_matrix),
    "index_select": _OpSpec(_index_select, _vjp_index_select, _check_index),
    "expand": _OpSpec(lambda x, shape: np.full(shape, float(x)), _vjp_expand, _check_scalar),
    "scatter": _OpSpec(_scatter, _vjp_scatter, _check_scatter),
    "pad_col": _OpSpec(_pad_col, _vjp_pad_col, _check_matrix),
    "drop_col": _OpSpec(lambda x: np.ascontiguousarray(x[:, :-1]), _vjp_drop_col, _check_matrix),
}


# ---------------------------------------------------------------------------


def _ancestors(output: Node) -> list[Node]:
    seen = {output.id: output}
    stack = [output]
    while stack:
        node = stack.pop()
        for p in node.parents:
            if p.id not in seen:
                seen[p.id] = p
                stack.append(p)
    return [seen[i] for i in sorted(seen)]


def backward(tape: Tape, output: Node, wrt: Sequence[Node], build_graph: bool = False):
    """Gradients of a scalar ``output`` with respect to each node in ``wrt``.

    Returns arrays, or nodes on ``tape`` when ``build_graph`` is set.  Nodes
    in ``wrt`` that ``output`` does not depend on get zero gradients.
    """
    if not tape.owns(output):
        raise TapeError("backward: output node is not on this tape")
    if output.value.size != 1:
        raise ShapeError("backward", [output.shape], "output must be scalar")
    for w in wrt:
        if not tape.owns(w):
            raise TapeError(f"backward: wrt node {w!r} is not on this tape")

    wrt_ids = {w.id for w in wrt}
    order = _ancestors(output)
    # nodes on a path from some wrt node to output
    live = set()
    for node in order:
        if node.id in wrt_ids or any(p.id in live for p in node.parents):
            live.add(node.id)

    if build_graph:
        tape.higher_order = True
        seed = tape.constant(np.ones(output.shape))
    else:
        seed = np.ones(output.shape)

    grads = {output.id: seed}
    found = {}
    for node in reversed(order):
        g = grads.pop(node.id, None)
        if g is None or node.id not in live:
            continue
        if node.id in wrt_ids:
            found[node.id] = g
        if not node.parents:
            continue
        needs = tuple(p.id in live for p in node.parents)
        if not any(needs):
            continue
        if build_graph:
            outs = _OPS[node.op].vjp(g, node, node.parents, needs, node.attrs)
        else:
            outs = _OPS[node.op].vjp(g, node.value, [p.value for p in node.parents], needs, node.attrs)
        for p, need, gp in zip(node.parents, needs, outs):
            if not need or gp is None:
                continue
            prev = grads.get(p.id)
            grads[p.id] = gp if prev is None else add(prev, gp)

    result = []
    for w in wrt:
        g = found.get(w.id)
        if g is None:
            g = tape.constant(np.zeros(w.shape)) if build_graph else np.zeros(w.shape)
        elif not build_graph and not np.all(np.isfinite(g)):
            raise NonFiniteError("backward")
        w.grad = g.value if isinstance(g, Node) else g
        result.append(g)
    return result


def finite_diff(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise ValueError("finite_diff: step size must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError("finite_diff")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
