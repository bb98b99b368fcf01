"""Tape-based reverse-mode differentiation over float64 ndarrays.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 laid out as
(C, H, W) or (N, C, H, W). A :class:`Graph` records every primitive in
creation order, so the tape is already topologically sorted and
:func:`backward` walks it once in reverse.

>>> g = Graph()
>>> p = g.param(np.array([1.0, -2.0]), "p")
>>> backward(g, mean(p * p))["p"]
array([ 1., -2.])
"""
from contextlib import contextmanager

import numpy as np

from . import kernels

_CORRUPT = {}


@contextmanager
def corrupt_gradient(op, factor=1.5):
    """Scale the analytic gradient of every ``op`` node (negative-control hook)."""
    _CORRUPT[op] = factor
    try:
        yield
    finally:
        _CORRUPT.pop(op, None)


class Node:
    __slots__ = ("graph", "id", "op", "inputs", "value", "grad", "name", "attrs", "_vjp")

    def __init__(self, graph, op, inputs, value, vjp=None, name=None, attrs=None):
        self.graph = graph
        self.op = op
        self.inputs = tuple(inputs)
        self.value = value
        self.grad = None
        self.name = name
        self.attrs = attrs or {}
        self._vjp = vjp
        self.id = len(graph.nodes)
        graph.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = self.name or self.op
        return f"Node({label}, id={self.id}, shape={self.shape})"

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

    def __neg__(self):
        return scale(self, -1.0)


class Graph:
    """Ordered record of primitive applications."""

    def __init__(self):
        self.nodes = []
        self.params = {}

    def param(self, value, name):
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        node = Node(self, "param", (), _as_array(value), name=name)
        self.params[name] = node
        return node

    def const(self, value):
        return Node(self, "const", (), _as_array(value))

    def release(self):
        """Drop cached values and closures; the graph is unusable afterwards."""
        for node in self.nodes:
            node._vjp = None
            node.inputs = ()
            node.value = None
            node.grad = None
        self.nodes = []
        self.params = {}

    def lift(self, x):
        if isinstance(x, Node):
            if x.graph is not self:
                raise ValueError("node belongs to a different graph")
            return x
        return self.const(x)


def _as_array(x):
    return np.array(x, dtype=np.float64)


def _graph_of(*xs):
    for x in xs:
        if isinstance(x, Node):
            return x.graph
    raise TypeError("at least one operand must be a Node")


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(graph, loss):
    """Accumulate d(loss)/d(node) for every node; return parameter gradients by name.

    Parameters the loss does not reach get zero gradients.
    """
    if loss.graph is not graph:
        raise ValueError("loss node is not part of this graph")
    if loss.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    for node in graph.nodes:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(graph.nodes[: loss.id + 1]):
        if node.grad is None or node._vjp is None:
            continue
        grads = node._vjp(node.grad)
        factor = _CORRUPT.get(node.op)
        for inp, gi in zip(node.inputs, grads):
            if gi is None:
                continue
            if factor is not None:
                gi = gi * factor
            inp.grad = gi if inp.grad is None else inp.grad + gi
    return {name: (p.grad if p.grad is not None else np.zeros_like(p.value))
            for name, p in graph.params.items()}


# ---------------------------------------------------------------- elementwise

def add(a, b):
    g = _graph_of(a, b)
    a, b = g.lift(a), g.lift(b)
    return Node(g, "add", (a, b), a.value + b.value,
                lambda gr: (_unbroadcast(gr, a.shape), _unbroadcast(gr, b.shape)))


def sub(a, b):
    g = _graph_of(a, b)
    a, b = g.lift(a), g.lift(b)
    return Node(g, "sub", (a, b), a.value - b.value,
                lambda gr: (_unbroadcast(gr, a.shape), -_unbroadcast(gr, b.shape)))


def mul(a, b):
    """Hadamard product with numpy broadcasting."""
    g = _graph_of(a, b)
    a, b = g.lift(a), g.lift(b)
    return Node(g, "mul", (a, b), a.value * b.value,
                lambda gr: (_unbroadcast(gr * b.value, a.shape),
                            _unbroadcast(gr * a.value, b.shape)))


def scale(a, k):
    k = float(k)
    return Node(a.graph, "scale", (a,), a.value * k, lambda gr: (gr * k,))


def absolute(a):
    return Node(a.graph, "abs", (a,), np.abs(a.value), lambda gr: (gr * np.sign(a.value),))


def exp(a):
    out = np.exp(a.value)
    return Node(a.graph, "exp", (a,), out, lambda gr: (gr * out,))


def sigmoid(a):
    x = a.value
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Node(a.graph, "sigmoid", (a,), out, lambda gr: (gr * out * (1.0 - out),))


def relu(a):
    mask = a.value > 0
    return Node(a.graph, "relu", (a,), np.where(mask, a.value, 0.0), lambda gr: (gr * mask,))


def activation(a, kind):
    if kind == "sigmoid":
        return sigmoid(a)
    if kind == "relu":
        return relu(a)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------- reductions

def mean(a):
    n = a.value.size
    return Node(a.graph, "mean", (a,), np.array(a.value.mean()),
                lambda gr: (np.full(a.shape, float(gr) / n),))


def total(a):
    return Node(a.graph, "sum", (a,), np.array(a.value.sum()),
                lambda gr: (np.full(a.shape, float(gr)),))


def _check_map(a, what):
    if a.value.ndim not in (3, 4):
        raise ValueError(f"{what} expects a (C,H,W) or (N,C,H,W) tensor, got shape {a.shape}")


def _first_argmax_mask(x, axis):
    """One-hot mask of the first maximal element along ``axis``."""
    idx = np.expand_dims(np.argmax(x, axis=axis), axis)
    mask = np.zeros_like(x)
    np.put_along_axis(mask, idx, 1.0, axis=axis)
    return mask


def global_pool(a, mode):
    """Per-channel mean or max over all spatial positions -> (..., C, 1, 1)."""
    _check_map(a, "global_pool")
    x = a.value
    if mode == "avg":
        hw = x.shape[-1] * x.shape[-2]
        return Node(a.graph, "global_avg_pool", (a,), x.mean(axis=(-2, -1), keepdims=True),
                    lambda gr: (np.broadcast_to(gr / hw, x.shape).copy(),))
    if mode == "max":
        flat = x.reshape(x.shape[:-2] + (-1,))
        mask = _first_argmax_mask(flat, -1).reshape(x.shape)
        out = flat.max(axis=-1)[..., None, None]
        return Node(a.graph, "global_max_pool", (a,), out, lambda gr: (mask * gr,))
    raise ValueError(f"unknown pool mode {mode!r}")


def channelwise_pool(a, mode):
    """Per-pixel mean or max across channels -> (..., 1, H, W)."""
    _check_map(a, "channelwise_pool")
    x = a.value
    if mode == "avg":
        c = x.shape[-3]
        return Node(a.graph, "channel_avg_pool", (a,), x.mean(axis=-3, keepdims=True),
                    lambda gr: (np.broadcast_to(gr / c, x.shape).copy(),))
    if mode == "max":
        mask = _first_argmax_mask(x, -3)
        return Node(a.graph, "channel_max_pool", (a,), x.max(axis=-3, keepdims=True),
                    lambda gr: (mask * gr,))
    raise ValueError(f"unknown pool mode {mode!r}")


# ---------------------------------------------------------------- structure

def concat(nodes, axis=-3):
    g = _graph_of(*nodes)
    nodes = [g.lift(n) for n in nodes]
    sizes = np.cumsum([n.shape[axis] for n in nodes])[:-1]
    out = np.concatenate([n.value for n in nodes], axis=axis)
    return Node(g, "concat", nodes, out, lambda gr: tuple(np.split(gr, sizes, axis=axis)))


def nearest_upsample(a, factor):
    factor = int(factor)
    if factor < 1:
        raise ValueError("upsample factor must be >= 1")
    _check_map(a, "nearest_upsample")
    x = a.value
    out = np.repeat(np.repeat(x, factor, axis=-2), factor, axis=-1)

    def vjp(gr):
        s = gr.shape[:-2] + (x.shape[-2], factor, x.shape[-1], factor)
        return (gr.reshape(s).sum(axis=(-3, -1)),)

    return Node(a.graph, "upsample", (a,), out, vjp, attrs={"factor": factor})


def spatial_gradient(a):
    """Forward differences (horizontal, vertical); last column/row is zero."""
    x = a.value
    gh = np.zeros_like(x)
    gv = np.zeros_like(x)
    gh[..., :, :-1] = x[..., :, 1:] - x[..., :, :-1]
    gv[..., :-1, :] = x[..., 1:, :] - x[..., :-1, :]

    def vjp_h(gr):
        out = np.zeros_like(gr)
        out[..., :, 1:] += gr[..., :, :-1]
        out[..., :, :-1] -= gr[..., :, :-1]
        return (out,)

    def vjp_v(gr):
        out = np.zeros_like(gr)
        out[..., 1:, :] += gr[..., :-1, :]
        out[..., :-1, :] -= gr[..., :-1, :]
        return (out,)

    return (Node(a.graph, "grad_h", (a,), gh, vjp_h),
            Node(a.graph, "grad_v", (a,), gv, vjp_v))


def channel_linear(weight, a):
    """out[..., o, h, w] = sum_c weight[o, c] * a[..., c, h, w]."""
    g = _graph_of(weight, a)
    weight, a = g.lift(weight), g.lift(a)
    if weight.value.ndim != 2 or weight.shape[1] != a.shape[-3]:
        raise ValueError(f"weight {weight.shape} does not match {a.shape[-3]} input channels")
    w, x = weight.value, a.value
    out = np.einsum("oc,...chw->...ohw", w, x)

    def vjp(gr):
        gw = np.einsum("...ohw,...chw->oc", gr, x)
        gx = np.einsum("oc,...ohw->...chw", w, gr)
        return gw, gx

    return Node(g, "channel_linear", (weight, a), out, vjp)


def conv2d(x, kernel, bias, stride=1, padding=0):
    """2-D cross-correlation with zero padding.

    ``x`` is (C_in, H, W) or (N, C_in, H, W); ``kernel`` is (C_out, C_in, kH, kW).
    """
    g = _graph_of(x, kernel, bias)
    x, kernel, bias = g.lift(x), g.lift(kernel), g.lift(bias)
    stride, padding = int(stride), int(padding)
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    w = kernel.value
    if w.ndim != 4:
        raise ValueError(f"kernel must be 4-D, got shape {w.shape}")
    if bias.value.shape != (w.shape[0],):
        raise ValueError(f"bias shape {bias.shape} does not match {w.shape[0]} output channels")
    xv = x.value
    squeeze = xv.ndim == 3
    if squeeze:
        xv = xv[None]
    if xv.ndim != 4:
        raise ValueError(f"conv2d input must be 3-D or 4-D, got shape {x.shape}")
    if xv.shape[1] != w.shape[1]:
        raise ValueError(f"kernel expects {w.shape[1]} input channels, input has {xv.shape[1]}")
    if w.shape[2] > xv.shape[2] + 2 * padding or w.shape[3] > xv.shape[3] + 2 * padding:
        raise ValueError(f"kernel {w.shape[2:]} larger than padded input {xv.shape[2:]}")
    p = padding
    xp = np.pad(xv, ((0, 0), (0, 0), (p, p), (p, p))) if p else np.ascontiguousarray(xv)
    out = kernels.conv2d_forward(xp, w, bias.value, stride)

    def vjp(gr):
        g4 = gr[None] if squeeze else gr
        gxp, gw, gb = kernels.conv2d_backward(xp, w, np.ascontiguousarray(g4), stride)
        gx = gxp[:, :, p:gxp.shape[2] - p, p:gxp.shape[3] - p] if p else gxp
        return (gx[0] if squeeze else gx), gw, gb

    return Node(g, "conv2d", (x, kernel, bias), out[0] if squeeze else out, vjp,
                attrs={"stride": stride, "padding": padding})


def bind(*xs):
    """Lift arrays into the graph shared by any Node among ``xs`` (or a new one)."""
    g = None
    for x in xs:
        if isinstance(x, Node):
            g = x.graph
            break
    if g is None:
        g = Graph()
    return tuple(g.lift(x) for x in xs)


def channel_slice(a, start, stop):
    """Channels ``start:stop`` of a (..., C, H, W) node."""
    x = a.value

    def vjp(gr):
        out = np.zeros_like(x)
        out[..., start:stop, :, :] = gr
        return (out,)

    return Node(a.graph, "channel_slice", (a,), x[..., start:stop, :, :].copy(), vjp)
