"""Reverse-mode autodiff over numpy arrays.

A :class:`Graph` owns an arena of :class:`Node` objects in creation order, so
parents always precede children and the arena itself is a topological order.
Every primitive registers a backward rule written in terms of other
primitives.  Running those rules while the graph keeps recording yields a
gradient that is itself a differentiable node (:meth:`Graph.grad_as_node`),
which is what gradient matching needs to reach the synthetic pixels.

Values are stored in the graph dtype (float32 by default).  Reductions and
the softmax are accumulated in float64 and cast back.

There is no broadcasting: binary ops require identical shapes and
:func:`expand` is the explicit broadcast primitive.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Graph",
    "Node",
    "ShapeError",
    "GradientError",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "conv3d",
    "relu",
    "sum",
    "mean",
    "sqnorm",
    "softmax_cross_entropy",
    "reshape",
    "concat",
    "stack",
    "expand",
    "slice_axis",
    "take",
    "flatten",
]

_builtin_sum = sum


class ShapeError(ValueError):
    """Operand shapes are incompatible for a primitive."""


class GradientError(RuntimeError):
    """A gradient request cannot be served (bad root, unknown leaf, missing rule)."""


class Op:
    """A primitive: a name, a backward rule and whether that rule is itself differentiable."""

    def __init__(self, name: str, backward: Callable | None, second_order: bool = True):
        self.name = name
        self.backward = backward
        self.second_order = second_order

    def __repr__(self):
        return f"Op({self.name})"


class Node:
    __slots__ = ("graph", "value", "op", "parents", "ctx", "kind", "index", "name")

    def __init__(self, graph, value, op=None, parents=(), ctx=None, kind="op", name=None):
        self.graph = graph
        self.value = value
        self.op = op
        self.parents = parents
        self.ctx = ctx
        self.kind = kind
        self.index = -1
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def __repr__(self):
        tag = self.op.name if self.op is not None else self.kind
        return f"Node({tag}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Node):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Graph:
    """Arena of nodes for one optimisation step.

    ``param`` and ``data`` leaves are registered and may be differentiated
    against; ``const`` nodes are unregistered values.  With
    ``check_finite=True`` every op raises ``FloatingPointError`` as soon as
    it produces a NaN or Inf.
    """

    def __init__(self, dtype=np.float32, check_finite: bool = False):
        self.dtype = np.dtype(dtype)
        self.check_finite = check_finite
        self.nodes: list[Node] = []
        self.leaves: dict[int, str] = {}
        self._recording = True

    # -- leaves -----------------------------------------------------------
    def _leaf(self, value, kind, name):
        node = Node(self, np.array(value, dtype=self.dtype), kind=kind, name=name)
        node.index = len(self.nodes)
        self.nodes.append(node)
        self.leaves[id(node)] = kind
        return node

    def param(self, value, name=None) -> Node:
        return self._leaf(value, "param", name)

    def data(self, value, name=None) -> Node:
        return self._leaf(value, "data", name)

    def const(self, value) -> Node:
        return Node(self, np.asarray(value, dtype=self.dtype), kind="const")

    @contextmanager
    def no_record(self):
        prev = self._recording
        self._recording = False
        try:
            yield
        finally:
            self._recording = prev

    # -- differentiation --------------------------------------------------
    def _check_request(self, root: Node, wrt: Sequence[Node]):
        if root.graph is not self:
            raise GradientError("root belongs to a different graph")
        if root.size != 1 or root.ndim > 1:
            raise GradientError(f"backward needs a scalar root, got shape {root.shape}")
        for leaf in wrt:
            if not isinstance(leaf, Node) or leaf.graph is not self or id(leaf) not in self.leaves:
                raise GradientError(f"unknown leaf {leaf!r}: not registered in this graph")

    def _backprop(self, root: Node, wrt: Sequence[Node], create_graph: bool) -> dict[int, Node]:
        self._check_request(root, wrt)
        if root.index < 0:
            return {}
        stop = root.index + 1
        targets = {leaf.index for leaf in wrt}
        need = [False] * stop
        for n in self.nodes[:stop]:
            if n.index in targets:
                need[n.index] = True
            elif n.parents:
                need[n.index] = any(p.index >= 0 and need[p.index] for p in n.parents)
        if not need[root.index]:
            return {}

        grads: dict[int, Node] = {}
        prev = self._recording
        self._recording = create_graph
        try:
            grads[root.index] = self.const(np.ones(root.shape))
            for n in reversed(self.nodes[:stop]):
                g = grads.get(n.index)
                if g is None or not n.parents:
                    continue
                if create_graph and not n.op.second_order:
                    raise GradientError(f"primitive '{n.op.name}' has no second-order rule")
                if n.op.backward is None:
                    raise GradientError(f"primitive '{n.op.name}' has no backward rule")
                mask = tuple(p.index >= 0 and need[p.index] for p in n.parents)
                parent_grads = n.op.backward(n, g, mask)
                for p, pg, m in zip(n.parents, parent_grads, mask):
                    if not m or pg is None:
                        continue
                    if pg.shape != p.shape:
                        raise GradientError(
                            f"{n.op.name} backward produced {pg.shape} for parent {p.shape}"
                        )
                    old = grads.get(p.index)
                    grads[p.index] = pg if old is None else add(old, pg)
        finally:
            self._recording = prev
        return grads

    def backward(self, root: Node, wrt: Iterable[Node]) -> dict[Node, np.ndarray]:
        """Gradients of the scalar ``root`` with respect to each leaf in ``wrt``.

        Leaves that ``root`` does not depend on get zero arrays.
        """
        wrt = list(wrt)
        grads = self._backprop(root, wrt, create_graph=False)
        out = {}
        for leaf in wrt:
            g = grads.get(leaf.index)
            out[leaf] = np.zeros(leaf.shape, self.dtype) if g is None else g.value
        return out

    def grad_as_node(self, root: Node, wrt: Sequence[Node]) -> Node:
        """Flattened gradient of ``root`` w.r.t. ``wrt`` as a differentiable node.

        Leaves are concatenated in the order given.  The returned node can be
        used in further computation and differentiated against other leaves.
        """
        wrt = list(wrt)
        grads = self._backprop(root, wrt, create_graph=True)
        parts = []
        for leaf in wrt:
            g = grads.get(leaf.index)
            if g is None:
                g = self.const(np.zeros(leaf.shape))
            parts.append(reshape(g, (leaf.size,)))
        return concat(parts, axis=0) if len(parts) > 1 else parts[0]


# ---------------------------------------------------------------------------
# node construction helpers


def _graph_of(*nodes: Node) -> Graph:
    graph = nodes[0].graph
    for n in nodes[1:]:
        if n.graph is not graph:
            raise ValueError("operands belong to different graphs")
    return graph


def _emit(op: Op, value: np.ndarray, parents: tuple, ctx=None) -> Node:
    graph = _graph_of(*parents)
    value = np.asarray(value, dtype=graph.dtype)
    if graph.check_finite and not np.all(np.isfinite(value)):
        raise FloatingPointError(f"non-finite value produced by '{op.name}'")
    if not graph._recording:
        return Node(graph, value, kind="const")
    node = Node(graph, value, op=op, parents=parents, ctx=ctx)
    node.index = len(graph.nodes)
    graph.nodes.append(node)
    return node


def _same_shape(name: str, a: Node, b: Node):
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


# ---------------------------------------------------------------------------
# elementwise


def _add_bw(n, g, mask):
    return g, g


def _sub_bw(n, g, mask):
    return g, (scale(g, -1.0) if mask[1] else None)


def _mul_bw(n, g, mask):
    a, b = n.parents
    return (mul(g, b) if mask[0] else None), (mul(g, a) if mask[1] else None)


def _scale_bw(n, g, mask):
    return (scale(g, n.ctx),)


def _relu_bw(n, g, mask):
    # relu'' is taken as zero everywhere, so the mask is a constant.
    (x,) = n.parents
    return (mul(g, g.graph.const(x.value > 0)),)


_ADD = Op("add", _add_bw)
_SUB = Op("sub", _sub_bw)
_MUL = Op("mul", _mul_bw)
_SCALE = Op("scale", _scale_bw)
_RELU = Op("relu", _relu_bw)


def add(a: Node, b: Node) -> Node:
    _same_shape("add", a, b)
    return _emit(_ADD, a.value + b.value, (a, b))


def sub(a: Node, b: Node) -> Node:
    _same_shape("sub", a, b)
    return _emit(_SUB, a.value - b.value, (a, b))


def mul(a: Node, b: Node) -> Node:
    _same_shape("mul", a, b)
    return _emit(_MUL, a.value * b.value, (a, b))


def scale(a: Node, s: float) -> Node:
    s = float(s)
    return _emit(_SCALE, a.value * a.graph.dtype.type(s), (a,), s)


def relu(x: Node) -> Node:
    return _emit(_RELU, np.maximum(x.value, 0), (x,))


# ---------------------------------------------------------------------------
# linear algebra


def _matmul_bw(n, g, mask):
    a, b = n.parents
    ga = matmul(g, transpose(b)) if mask[0] else None
    gb = matmul(transpose(a), g) if mask[1] else None
    return ga, gb


def _transpose_bw(n, g, mask):
    inverse = tuple(np.argsort(n.ctx))
    return (transpose(g, inverse),)


_MATMUL = Op("matmul", _matmul_bw)
_TRANSPOSE = Op("transpose", _transpose_bw)


def matmul(a: Node, b: Node) -> Node:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _emit(_MATMUL, a.value @ b.value, (a, b))


def transpose(a: Node, axes: Sequence[int] | None = None) -> Node:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    return _emit(_TRANSPOSE, np.transpose(a.value, axes), (a,), axes)


# ---------------------------------------------------------------------------
# 3-D cross-correlation, stride 1, zero "same" padding.
# x: (B, T, H, W, Cin), w: (kt, kh, kw, Cin, Cout), y: (B, T, H, W, Cout).
# The op and its two adjoints are bilinear and close under differentiation.


def _pads(ksize):
    return tuple(k // 2 for k in ksize)


def _padded(x, pads):
    pt, ph, pw = pads
    return np.pad(x, ((0, 0), (pt, pt), (ph, ph), (pw, pw), (0, 0)))


def _offsets(ksize):
    kt, kh, kw = ksize
    for a in range(kt):
        for b in range(kh):
            for c in range(kw):
                yield a, b, c


def _conv_fwd(x, w):
    B, T, H, W, _ = x.shape
    ksize = w.shape[:3]
    xp = _padded(x, _pads(ksize))
    y = np.zeros((B, T, H, W, w.shape[4]), x.dtype)
    for a, b, c in _offsets(ksize):
        y += xp[:, a : a + T, b : b + H, c : c + W, :] @ w[a, b, c]
    return y


def _conv_grad_input(gy, w):
    B, T, H, W, _ = gy.shape
    ksize = w.shape[:3]
    pt, ph, pw = _pads(ksize)
    gxp = np.zeros((B, T + 2 * pt, H + 2 * ph, W + 2 * pw, w.shape[3]), gy.dtype)
    for a, b, c in _offsets(ksize):
        gxp[:, a : a + T, b : b + H, c : c + W, :] += gy @ w[a, b, c].T
    return gxp[:, pt : pt + T, ph : ph + H, pw : pw + W, :]


def _conv_grad_weight(x, gy, ksize):
    B, T, H, W, cin = x.shape
    cout = gy.shape[4]
    xp = _padded(x, _pads(ksize))
    g2 = gy.reshape(-1, cout)
    gw = np.zeros((*ksize, cin, cout), x.dtype)
    for a, b, c in _offsets(ksize):
        gw[a, b, c] = xp[:, a : a + T, b : b + H, c : c + W, :].reshape(-1, cin).T @ g2
    return gw


def _conv_bw(n, g, mask):
    x, w = n.parents
    gx = conv3d_grad_input(g, w) if mask[0] else None
    gw = conv3d_grad_weight(x, g, w.shape[:3]) if mask[1] else None
    return gx, gw


def _conv_gi_bw(n, g, mask):
    gy, w = n.parents
    ggy = conv3d(g, w) if mask[0] else None
    gw = conv3d_grad_weight(g, gy, w.shape[:3]) if mask[1] else None
    return ggy, gw


def _conv_gw_bw(n, g, mask):
    x, gy = n.parents
    gx = conv3d_grad_input(gy, g) if mask[0] else None
    ggy = conv3d(x, g) if mask[1] else None
    return gx, ggy


_CONV = Op("conv3d", _conv_bw)
_CONV_GI = Op("conv3d_grad_input", _conv_gi_bw)
_CONV_GW = Op("conv3d_grad_weight", _conv_gw_bw)


def _check_kernel(w_shape):
    if len(w_shape) != 5 or any(k % 2 == 0 for k in w_shape[:3]):
        raise ShapeError(f"conv3d: kernel must be (kt, kh, kw, Cin, Cout) with odd extents, got {w_shape}")


def conv3d(x: Node, w: Node) -> Node:
    _check_kernel(w.shape)
    if x.ndim != 5 or x.shape[4] != w.shape[3]:
        raise ShapeError(f"conv3d: input {x.shape} incompatible with kernel {w.shape}")
    return _emit(_CONV, _conv_fwd(x.value, w.value), (x, w))


def conv3d_grad_input(gy: Node, w: Node) -> Node:
    _check_kernel(w.shape)
    if gy.ndim != 5 or gy.shape[4] != w.shape[4]:
        raise ShapeError(f"conv3d_grad_input: gradient {gy.shape} incompatible with kernel {w.shape}")
    return _emit(_CONV_GI, _conv_grad_input(gy.value, w.value), (gy, w))


def conv3d_grad_weight(x: Node, gy: Node, ksize: Sequence[int]) -> Node:
    ksize = tuple(ksize)
    if x.ndim != 5 or gy.ndim != 5 or x.shape[:4] != gy.shape[:4]:
        raise ShapeError(f"conv3d_grad_weight: input {x.shape} vs gradient {gy.shape}")
    return _emit(_CONV_GW, _conv_grad_weight(x.value, gy.value, ksize), (x, gy), ksize)


# ---------------------------------------------------------------------------
# reductions


def _keep_shape(shape, axes):
    return tuple(1 if i in axes else d for i, d in enumerate(shape))


def _sum_bw(n, g, mask):
    (x,) = n.parents
    axes, keepdims = n.ctx
    if not keepdims:
        g = reshape(g, _keep_shape(x.shape, axes))
    return (expand(g, x.shape),)


def _mean_bw(n, g, mask):
    (x,) = n.parents
    axes = n.ctx
    count = int(np.prod([x.shape[a] for a in axes]))
    g = reshape(g, _keep_shape(x.shape, axes))
    return (scale(expand(g, x.shape), 1.0 / count),)


def _sqnorm_bw(n, g, mask):
    (x,) = n.parents
    g = expand(reshape(g, (1,) * x.ndim), x.shape)
    return (scale(mul(g, x), 2.0),)


_SUM = Op("sum", _sum_bw)
_MEAN = Op("mean", _mean_bw)
_SQNORM = Op("sqnorm", _sqnorm_bw)


def sum(x: Node, axis=None, keepdims: bool = False) -> Node:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    value = np.sum(x.value, axis=axes, dtype=np.float64, keepdims=keepdims)
    return _emit(_SUM, value, (x,), (axes, keepdims))


def mean(x: Node, axis=None) -> Node:
    axes = _norm_axes(axis, x.ndim)
    value = np.mean(x.value, axis=axes, dtype=np.float64)
    return _emit(_MEAN, value, (x,), axes)


def sqnorm(x: Node) -> Node:
    v = x.value.astype(np.float64)
    return _emit(_SQNORM, np.dot(v.ravel(), v.ravel()), (x,))


# ---------------------------------------------------------------------------
# softmax cross-entropy with integer labels, averaged over the batch


def _softmax64(z):
    z = z.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _ce_bw(n, g, mask):
    (z,) = n.parents
    g = expand(reshape(g, (1, 1)), z.shape)
    return (mul(g, _ce_grad(z, n.ctx)),)


def _ce_grad_bw(n, g, mask):
    (z,) = n.parents
    return (_ce_hvp(z, g),)


_CE = Op("softmax_cross_entropy", _ce_bw)
# Backward of the logit gradient is a Hessian-vector product that is not
# differentiated again, so the chain stops at second order.
_CE_GRAD = Op("softmax_cross_entropy_grad", _ce_grad_bw)
_CE_HVP = Op("softmax_cross_entropy_hvp", None, second_order=False)


def softmax_cross_entropy(logits: Node, labels) -> Node:
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ShapeError(f"softmax_cross_entropy: labels out of range for {logits.shape[1]} classes")
    z = logits.value.astype(np.float64)
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    loss = np.mean(lse - z[np.arange(len(labels)), labels])
    return _emit(_CE, loss, (logits,), labels)


def _ce_grad(z: Node, labels) -> Node:
    p = _softmax64(z.value)
    p[np.arange(len(labels)), labels] -= 1.0
    return _emit(_CE_GRAD, p / len(labels), (z,), labels)


def _ce_hvp(z: Node, v: Node) -> Node:
    p = _softmax64(z.value)
    pv = p * v.value.astype(np.float64)
    out = (pv - p * pv.sum(axis=1, keepdims=True)) / z.shape[0]
    return _emit(_CE_HVP, out, (z, v))


# ---------------------------------------------------------------------------
# shape manipulation


def _reshape_bw(n, g, mask):
    return (reshape(g, n.parents[0].shape),)


def _expand_bw(n, g, mask):
    (x,) = n.parents
    axes = tuple(i for i, (a, b) in enumerate(zip(x.shape, n.shape)) if a != b)
    if not axes:
        return (g,)
    return (sum(g, axis=axes, keepdims=True),)


def _concat_bw(n, g, mask):
    axis = n.ctx
    out, start = [], 0
    for p, m in zip(n.parents, mask):
        stop = start + p.shape[axis]
        out.append(slice_axis(g, axis, start, stop) if m else None)
        start = stop
    return tuple(out)


def _slice_bw(n, g, mask):
    axis, start, _ = n.ctx
    return (_pad_axis(g, axis, start, n.parents[0].shape[axis]),)


def _pad_bw(n, g, mask):
    axis, start, _ = n.ctx
    return (slice_axis(g, axis, start, start + n.parents[0].shape[axis]),)


_RESHAPE = Op("reshape", _reshape_bw)
_EXPAND = Op("expand", _expand_bw)
_CONCAT = Op("concat", _concat_bw)
_SLICE = Op("slice", _slice_bw)
_PAD = Op("pad", _pad_bw)


def reshape(x: Node, shape: Sequence[int]) -> Node:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}")
    return _emit(_RESHAPE, x.value.reshape(shape), (x,))


def flatten(x: Node) -> Node:
    return reshape(x, (x.size,))


def expand(x: Node, shape: Sequence[int]) -> Node:
    """Broadcast size-1 axes of ``x`` to ``shape`` (ranks must match)."""
    shape = tuple(shape)
    if len(shape) != x.ndim or any(a != b and a != 1 for a, b in zip(x.shape, shape)):
        raise ShapeError(f"expand: cannot expand {x.shape} to {shape}")
    return _emit(_EXPAND, np.broadcast_to(x.value, shape).copy(), (x,))


def concat(xs: Sequence[Node], axis: int = 0) -> Node:
    xs = tuple(xs)
    if not xs:
        raise ShapeError("concat: no operands")
    axis = axis % xs[0].ndim
    ref = xs[0].shape
    for x in xs[1:]:
        if x.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(x.shape, ref)) if i != axis):
            raise ShapeError(f"concat: shape mismatch {ref} vs {x.shape} along axis {axis}")
    value = np.concatenate([x.value for x in xs], axis=axis)
    return _emit(_CONCAT, value, xs, axis)


def stack(xs: Sequence[Node], axis: int = 0) -> Node:
    xs = list(xs)
    expanded = []
    for x in xs:
        shape = list(x.shape)
        shape.insert(axis % (x.ndim + 1), 1)
        expanded.append(reshape(x, shape))
    return concat(expanded, axis=axis)


def slice_axis(x: Node, axis: int, start: int, stop: int) -> Node:
    axis = axis % x.ndim
    if not 0 <= start < stop <= x.shape[axis]:
        raise ShapeError(f"slice: [{start}:{stop}] out of range for axis {axis} of {x.shape}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    return _emit(_SLICE, x.value[tuple(index)], (x,), (axis, start, stop))


def _pad_axis(x: Node, axis: int, start: int, total: int) -> Node:
    shape = list(x.shape)
    shape[axis] = total
    out = np.zeros(shape, x.value.dtype)
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, start + x.shape[axis])
    out[tuple(index)] = x.value
    return _emit(_PAD, out, (x,), (axis, start, total))


def take(x: Node, axis: int, i: int) -> Node:
    """``x[..., i, ...]`` along ``axis`` with that axis removed."""
    axis = axis % x.ndim
    part = slice_axis(x, axis, i, i + 1)
    return reshape(part, x.shape[:axis] + x.shape[axis + 1 :])
