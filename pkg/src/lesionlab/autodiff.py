"""Dense float64 tensors with a tape-based reverse-mode differentiator.

Every op is a ``(forward, backward)`` pair registered in ``OPS``. A ``Graph``
appends one node per op application; ``Graph.backward`` walks the tape in
reverse append order exactly once. Graphs built with ``record=False`` compute
values only, which is what generation and metric evaluation use.

Broadcasting is limited to the bias vector of ``affine`` and the gain/bias of
``layernorm``. Scalars are 0-d arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import expit


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError):
    def __init__(self, op: str, message: str):
        super().__init__(f"{op}: {message}")
        self.op = op


class NumericalError(AutodiffError):
    def __init__(self, op: str):
        super().__init__(f"{op}: non-finite value in output")
        self.op = op


class ProtocolError(AutodiffError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "graph", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.node = None
        self.graph = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


@dataclass
class Op:
    forward: Callable
    backward: Callable


OPS: dict[str, Op] = {}


def register(kind):
    def wrap(pair):
        fwd, bwd = pair()
        OPS[kind] = Op(fwd, bwd)
        return pair

    return wrap


def _need_2d(op, *arrays):
    for a in arrays:
        if a.ndim != 2:
            raise ShapeError(op, f"expected a 2-d operand, got shape {a.shape}")


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(op, f"operand shapes differ: {a.shape} vs {b.shape}")


# -- op definitions -----------------------------------------------------------
# forward(*arrays, **attrs) -> out
# backward(g, out, arrays, **attrs) -> tuple of input gradients


@register("affine")
def _affine():
    def fwd(x, w, b=None):
        _need_2d("affine", x, w)
        if x.shape[1] != w.shape[0]:
            raise ShapeError("affine", f"x has {x.shape[1]} columns but weight has {w.shape[0]} rows")
        if b is None:
            return x @ w
        if b.shape != (w.shape[1],):
            raise ShapeError("affine", f"bias shape {b.shape} does not match output width {w.shape[1]}")
        return x @ w + b

    def bwd(g, out, arrays):
        x, w = arrays[0], arrays[1]
        grads = (g @ w.T, x.T @ g)
        if len(arrays) == 3:
            grads += (g.sum(axis=0),)
        return grads

    return fwd, bwd


@register("matmul")
def _matmul():
    def fwd(a, b):
        _need_2d("matmul", a, b)
        if a.shape[1] != b.shape[0]:
            raise ShapeError("matmul", f"inner dims differ: {a.shape} @ {b.shape}")
        return a @ b

    def bwd(g, out, arrays):
        a, b = arrays
        return g @ b.T, a.T @ g

    return fwd, bwd


@register("transpose")
def _transpose():
    def fwd(a):
        _need_2d("transpose", a)
        return np.ascontiguousarray(a.T)

    def bwd(g, out, arrays):
        return (np.ascontiguousarray(g.T),)

    return fwd, bwd


@register("add")
def _add():
    def fwd(a, b):
        _same_shape("add", a, b)
        return a + b

    def bwd(g, out, arrays):
        return g, g

    return fwd, bwd


@register("mul")
def _mul():
    def fwd(a, b):
        _same_shape("mul", a, b)
        return a * b

    def bwd(g, out, arrays):
        a, b = arrays
        return g * b, g * a

    return fwd, bwd


@register("scale")
def _scale():
    def fwd(a, c):
        return a * c

    def bwd(g, out, arrays, c):
        return (g * c,)

    return fwd, bwd


@register("silu")
def _silu():
    def fwd(x):
        return x * expit(x)

    def bwd(g, out, arrays):
        (x,) = arrays
        s = expit(x)
        return (g * (s + x * s * (1.0 - s)),)

    return fwd, bwd


@register("softmax")
def _softmax():
    def fwd(x, allowed=None):
        _need_2d("softmax", x)
        if allowed is not None:
            if allowed.shape != x.shape:
                raise ShapeError("softmax", f"mask shape {allowed.shape} vs logits {x.shape}")
            x = np.where(allowed, x, -np.inf)
        m = x.max(axis=1, keepdims=True)
        e = np.exp(x - m)
        return e / e.sum(axis=1, keepdims=True)

    def bwd(g, out, arrays, allowed=None):
        inner = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - inner),)

    return fwd, bwd


LN_EPS = 1e-5


@register("layernorm")
def _layernorm():
    def fwd(x, gain, bias):
        _need_2d("layernorm", x)
        d = x.shape[1]
        if gain.shape != (d,) or bias.shape != (d,):
            raise ShapeError("layernorm", f"gain {gain.shape} / bias {bias.shape} do not match width {d}")
        mu = x.mean(axis=1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=1, keepdims=True)
        return xc / np.sqrt(var + LN_EPS) * gain + bias

    def bwd(g, out, arrays):
        x, gain, bias = arrays
        mu = x.mean(axis=1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(var + LN_EPS)
        xhat = xc * inv
        gx_hat = g * gain
        gx = inv * (gx_hat - gx_hat.mean(axis=1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=1, keepdims=True))
        return gx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return fwd, bwd


@register("embedding")
def _embedding():
    def fwd(table, ids):
        _need_2d("embedding", table)
        ids = np.asarray(ids)
        if ids.ndim != 1:
            raise ShapeError("embedding", f"ids must be 1-d, got shape {ids.shape}")
        if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
            raise ShapeError("embedding", f"id out of range for table with {table.shape[0]} rows")
        return table[ids]

    def bwd(g, out, arrays, ids):
        (table,) = arrays
        gt = np.zeros_like(table)
        np.add.at(gt, np.asarray(ids), g)
        return (gt,)

    return fwd, bwd


def log_softmax(x):
    """Row-wise log-softmax of a 2-d array, max-subtracted."""
    m = x.max(axis=1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


@register("cross_entropy")
def _cross_entropy():
    def fwd(logits, targets, weights=None):
        _need_2d("cross_entropy", logits)
        targets = np.asarray(targets)
        n = logits.shape[0]
        if targets.shape != (n,):
            raise ShapeError("cross_entropy", f"targets shape {targets.shape} vs {n} rows")
        w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
        if w.shape != (n,):
            raise ShapeError("cross_entropy", f"weights shape {w.shape} vs {n} rows")
        nll = -log_softmax(logits)[np.arange(n), targets]
        return np.asarray((w * nll).sum() / w.sum())

    def bwd(g, out, arrays, targets, weights=None):
        (logits,) = arrays
        n = logits.shape[0]
        w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
        p = np.exp(log_softmax(logits))
        p[np.arange(n), np.asarray(targets)] -= 1.0
        return (g * p * (w / w.sum())[:, None],)

    return fwd, bwd


@register("sum")
def _sum():
    def fwd(a):
        return np.asarray(a.sum())

    def bwd(g, out, arrays):
        return (np.full_like(arrays[0], g),)

    return fwd, bwd


@register("mean_rows")
def _mean_rows():
    def fwd(a):
        _need_2d("mean_rows", a)
        return a.mean(axis=0, keepdims=True)

    def bwd(g, out, arrays):
        a = arrays[0]
        return (np.repeat(g / a.shape[0], a.shape[0], axis=0),)

    return fwd, bwd


NORM_EPS = 1e-12


@register("normalize_rows")
def _normalize_rows():
    def fwd(a):
        _need_2d("normalize_rows", a)
        return a / (np.sqrt((a * a).sum(axis=1, keepdims=True)) + NORM_EPS)

    def bwd(g, out, arrays):
        a = arrays[0]
        r = np.sqrt((a * a).sum(axis=1, keepdims=True))
        d = r + NORM_EPS
        # y = a / d(r); dy/da = I/d - a a^T / (d^2 r)
        ga = g / d - a * (g * a).sum(axis=1, keepdims=True) / (d * d * np.where(r > 0, r, 1.0))
        return (ga,)

    return fwd, bwd


@register("concat_rows")
def _concat_rows():
    def fwd(*parts):
        _need_2d("concat_rows", *parts)
        widths = {p.shape[1] for p in parts}
        if len(widths) != 1:
            raise ShapeError("concat_rows", f"column counts differ: {sorted(widths)}")
        return np.concatenate(parts, axis=0)

    def bwd(g, out, arrays):
        cuts = np.cumsum([a.shape[0] for a in arrays])[:-1]
        return tuple(np.split(g, cuts, axis=0))

    return fwd, bwd


@register("concat_cols")
def _concat_cols():
    def fwd(*parts):
        _need_2d("concat_cols", *parts)
        heights = {p.shape[0] for p in parts}
        if len(heights) != 1:
            raise ShapeError("concat_cols", f"row counts differ: {sorted(heights)}")
        return np.concatenate(parts, axis=1)

    def bwd(g, out, arrays):
        cuts = np.cumsum([a.shape[1] for a in arrays])[:-1]
        return tuple(np.ascontiguousarray(p) for p in np.split(g, cuts, axis=1))

    return fwd, bwd


@register("slice_cols")
def _slice_cols():
    def fwd(a, start, stop):
        _need_2d("slice_cols", a)
        if not 0 <= start < stop <= a.shape[1]:
            raise ShapeError("slice_cols", f"slice [{start}:{stop}] outside width {a.shape[1]}")
        return np.ascontiguousarray(a[:, start:stop])

    def bwd(g, out, arrays, start, stop):
        ga = np.zeros_like(arrays[0])
        ga[:, start:stop] = g
        return (ga,)

    return fwd, bwd


@register("mask_cols")
def _mask_cols():
    def fwd(a, cols):
        _need_2d("mask_cols", a)
        cols = np.asarray(cols, dtype=np.int64)
        if cols.size and (cols.min() < 0 or cols.max() >= a.shape[1]):
            raise ShapeError("mask_cols", f"channel out of range for width {a.shape[1]}")
        out = a.copy()
        out[:, cols] = 0.0
        return out

    def bwd(g, out, arrays, cols):
        ga = g.copy()
        ga[:, np.asarray(cols, dtype=np.int64)] = 0.0
        return (ga,)

    return fwd, bwd


# -- graph --------------------------------------------------------------------


@dataclass
class Node:
    kind: str
    inputs: tuple
    output: Tensor
    attrs: dict


class Graph:
    """Append-only tape. Not thread-safe; use one graph per thread."""

    def __init__(self, record=True):
        self.record = record
        self.nodes: list[Node] = []

    def tensor(self, data, requires_grad=False, name=None):
        t = Tensor(data, requires_grad=requires_grad, name=name)
        if not np.all(np.isfinite(t.data)):
            raise NumericalError("leaf" if name is None else f"leaf {name}")
        self._append("leaf", (), t, {})
        return t

    def param(self, data, name=None):
        return self.tensor(data, requires_grad=True, name=name)

    def _append(self, kind, inputs, out, attrs):
        out.graph = self
        if self.record:
            out.node = len(self.nodes)
            self.nodes.append(Node(kind, inputs, out, attrs))

    def apply(self, kind, inputs, **attrs):
        op = OPS[kind]
        for t in inputs:
            if t.graph is not self:
                raise ProtocolError(f"{kind}: input tensor belongs to a different graph")
        data = op.forward(*(t.data for t in inputs), **attrs)
        if not np.all(np.isfinite(data)):
            raise NumericalError(kind)
        out = Tensor(data, requires_grad=any(t.requires_grad for t in inputs))
        self._append(kind, tuple(inputs), out, attrs)
        return out

    # convenience wrappers
    def affine(self, x, w, b=None):
        return self.apply("affine", (x, w) if b is None else (x, w, b))

    def matmul(self, a, b):
        return self.apply("matmul", (a, b))

    def transpose(self, a):
        return self.apply("transpose", (a,))

    def add(self, a, b):
        return self.apply("add", (a, b))

    def mul(self, a, b):
        return self.apply("mul", (a, b))

    def scale(self, a, c):
        return self.apply("scale", (a,), c=float(c))

    def silu(self, x):
        return self.apply("silu", (x,))

    def softmax(self, x, allowed=None):
        return self.apply("softmax", (x,), allowed=allowed)

    def layernorm(self, x, gain, bias):
        return self.apply("layernorm", (x, gain, bias))

    def embedding(self, table, ids):
        return self.apply("embedding", (table,), ids=np.asarray(ids, dtype=np.int64))

    def cross_entropy(self, logits, targets, weights=None):
        return self.apply("cross_entropy", (logits,), targets=np.asarray(targets, dtype=np.int64),
                          weights=weights)

    def sum(self, a):
        return self.apply("sum", (a,))

    def mean_rows(self, a):
        return self.apply("mean_rows", (a,))

    def normalize_rows(self, a):
        return self.apply("normalize_rows", (a,))

    def concat_rows(self, parts):
        return self.apply("concat_rows", tuple(parts))

    def concat_cols(self, parts):
        return self.apply("concat_cols", tuple(parts))

    def slice_cols(self, a, start, stop):
        return self.apply("slice_cols", (a,), start=int(start), stop=int(stop))

    def mask_cols(self, a, cols):
        return self.apply("mask_cols", (a,), cols=np.asarray(cols, dtype=np.int64))

    def backward(self, loss):
        """Return ``{node id: d loss / d tensor}`` for every grad-requiring tensor.

        Also stores each gradient on ``tensor.grad``. Tensors with no path to
        the loss get an all-zero gradient.
        """
        if not self.record:
            raise ProtocolError("backward on a graph built with record=False")
        if loss.graph is not self or loss.node is None or loss.node >= len(self.nodes):
            raise ProtocolError("backward before forward: loss was not produced by this graph")
        if loss.data.size != 1:
            raise ProtocolError(f"loss must be scalar, got shape {loss.data.shape}")

        grads: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
        for idx in range(loss.node, -1, -1):
            node = self.nodes[idx]
            g = grads.get(idx)
            if g is None or not node.inputs:
                continue
            if not any(t.requires_grad for t in node.inputs):
                continue
            in_grads = OPS[node.kind].backward(g, node.output.data, tuple(t.data for t in node.inputs),
                                               **node.attrs)
            for t, gi in zip(node.inputs, in_grads):
                if not t.requires_grad:
                    continue
                prev = grads.get(t.node)
                grads[t.node] = gi if prev is None else prev + gi

        out = {}
        for node in self.nodes:
            t = node.output
            if t.requires_grad:
                t.grad = grads.get(t.node, np.zeros_like(t.data))
                out[t.node] = t.grad
        return out
