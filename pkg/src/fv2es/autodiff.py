"""Reverse-mode differentiation over the tensor kernels.

A :class:`Var` wraps an array. Operations on Vars record their parents and a
closure mapping the output gradient to parent gradients; :func:`backward`
walks the recorded graph in reverse topological order. Model code is written
once against these ops and runs either with gradients (training) or under
:func:`no_grad` (inference), where nothing is recorded.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import tensor as T
from .errors import DimensionMismatch, NotScalarLoss

_GRAD_ENABLED = [True]


@contextlib.contextmanager
def no_grad():
    prev = _GRAD_ENABLED[0]
    _GRAD_ENABLED[0] = False
    try:
        yield
    finally:
        _GRAD_ENABLED[0] = prev


class Var:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents: tuple = ()
        self.backward_fn = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Var(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def value(x) -> np.ndarray:
    return x.data if isinstance(x, Var) else np.asarray(x)


def _node(data: np.ndarray, parents: tuple, backward_fn: Callable) -> Var:
    T.check_finite(data)
    out = Var(data)
    if _GRAD_ENABLED[0] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def topo_order(root: Var) -> list[Var]:
    """Nodes reachable from ``root`` that require grad, inputs before outputs."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Var) -> None:
    if loss.data.size != 1:
        raise NotScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = topo_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = _unbroadcast(pg, parent.shape)
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg


# elementwise -----------------------------------------------------------

def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def neg(a) -> Var:
    a = as_var(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def relu(a) -> Var:
    a = as_var(a)
    mask = a.data > 0
    return _node(T.relu(a.data), (a,), lambda g: (g * mask,))


def gelu(a) -> Var:
    a = as_var(a)
    x = a.data

    def bwd(g):
        cdf = 0.5 * (1.0 + T.erf(x * T._INV_SQRT2))
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        return ((g * (cdf + x * pdf)).astype(x.dtype),)
    return _node(T.gelu(x), (a,), bwd)


def sigmoid(a) -> Var:
    a = as_var(a)
    s = T.sigmoid(a.data)
    return _node(s, (a,), lambda g: (g * s * (1 - s),))


def softmax(a) -> Var:
    a = as_var(a)
    s = T.softmax(a.data)

    def bwd(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)
    return _node(s, (a,), bwd)


# shape ---------------------------------------------------------------------

def reshape(a, shape) -> Var:
    a = as_var(a)
    src = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a, axes) -> Var:
    a = as_var(a)
    inv = np.argsort(axes)
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a, i: int, j: int) -> Var:
    a = as_var(a)
    return _node(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def getitem(a, idx) -> Var:
    a = as_var(a)

    def bwd(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)
    return _node(a.data[idx], (a,), bwd)


def concat(vs, axis: int = -1) -> Var:
    vs = [as_var(v) for v in vs]
    sizes = np.cumsum([v.shape[axis] for v in vs])[:-1]

    def bwd(g):
        return tuple(np.split(g, sizes, axis=axis))
    return _node(np.concatenate([v.data for v in vs], axis=axis), tuple(vs), bwd)


def stack(vs, axis: int = 0) -> Var:
    vs = [as_var(v) for v in vs]

    def bwd(g):
        return tuple(np.moveaxis(g, axis, 0))
    return _node(np.stack([v.data for v in vs], axis=axis), tuple(vs), bwd)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Var:
    a = as_var(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)
    return _node(np.asarray(out), (a,), bwd)


def mean(a, axis=None, keepdims: bool = False) -> Var:
    a = as_var(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size // max(np.asarray(out).size, 1)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((np.broadcast_to(g, a.shape) / a.dtype.type(count)).astype(a.dtype),)
    return _node(np.asarray(out), (a,), bwd)


def embedding(table, ids) -> Var:
    table = as_var(table)
    ids = np.asarray(ids, dtype=np.int64)

    def bwd(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids, g)
        return (out,)
    return _node(table.data[ids], (table,), bwd)


# linear algebra ----------------------------------------------------------

def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)

    def bwd(g):
        ga = T.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = T.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return ga, gb
    return _node(T.matmul(a.data, b.data), (a, b), bwd)


def linear(x, w, b=None) -> Var:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Var:
    x, w = as_var(x), as_var(w)
    squeeze = x.ndim == 3
    xb = x.data[None] if squeeze else x.data
    if xb.ndim != 4 or xb.shape[1] != w.shape[1]:
        raise DimensionMismatch(f"conv2d: input {x.shape} vs kernel {w.shape}")
    cout, cin, k, _ = w.shape
    n, _, h, wd = xb.shape
    ho, wo = T.out_size(h, k, stride, pad), T.out_size(wd, k, stride, pad)
    cols = T.im2col(xb, k, stride, pad)
    w2 = w.data.reshape(cout, cin * k * k)
    out = T.matmul(w2, cols)
    parents = (x, w)
    if b is not None:
        b = as_var(b)
        out = out + b.data[:, None]
        parents = (x, w, b)
    out = out.reshape(n, cout, ho, wo)

    def bwd(g):
        g2 = g.reshape(n, cout, ho * wo)
        gx = gw = gb = None
        if x.requires_grad:
            gcols = T.matmul(w2.T, g2)
            gx = T.col2im(gcols, xb.shape, k, stride, pad)
            if squeeze:
                gx = gx[0]
        if w.requires_grad:
            gw = T.matmul(g2, np.swapaxes(cols, -1, -2)).sum(axis=0).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=(0, 2))
        return (gx, gw, gb)[:len(parents)]
    return _node(out[0] if squeeze else out, parents, bwd)


def maxpool2d(x, k: int, stride: int, pad: int = 0) -> Var:
    x = as_var(x)
    squeeze = x.ndim == 3
    xb = x.data[None] if squeeze else x.data
    n, c, h, w = xb.shape
    ho, wo = T.out_size(h, k, stride, pad), T.out_size(w, k, stride, pad)
    cols = T.im2col(xb, k, stride, pad, fill=-np.inf).reshape(n, c, k * k, ho * wo)
    arg = cols.argmax(axis=2)
    out = np.take_along_axis(cols, arg[:, :, None], axis=2)[:, :, 0].reshape(n, c, ho, wo)

    def bwd(g):
        sel = np.zeros((n, c, k * k, ho * wo), dtype=g.dtype)
        np.put_along_axis(sel, arg[:, :, None], g.reshape(n, c, 1, ho * wo), axis=2)
        gx = T.col2im(sel.reshape(n, c * k * k, ho * wo), xb.shape, k, stride, pad)
        return (gx[0] if squeeze else gx,)
    return _node(out[0] if squeeze else out, (x,), bwd)


def batch_norm(x, gamma, beta, running_mean, running_var, eps: float = 1e-5) -> Var:
    """Inference-form batch norm with fixed statistics (channel axis = -3)."""
    x, gamma, beta = as_var(x), as_var(gamma), as_var(beta)
    mu = value(running_mean)[:, None, None]
    std = np.sqrt(value(running_var) + eps).astype(x.dtype)[:, None, None]
    xhat = (x.data - mu) / std
    out = xhat * gamma.data[:, None, None] + beta.data[:, None, None]
    red = tuple(i for i in range(x.ndim) if i != x.ndim - 3)

    def bwd(g):
        return (g * gamma.data[:, None, None] / std,
                (g * xhat).sum(axis=red), g.sum(axis=red))
    return _node(out, (x, gamma, beta), bwd)


def batch_norm_train(x, gamma, beta, eps: float = 1e-5):
    """Batch-statistics batch norm over all axes but the channel axis (-3).

    Returns the output and the (mean, biased variance) used, for running
    average updates by the caller.
    """
    x, gamma, beta = as_var(x), as_var(gamma), as_var(beta)
    red = tuple(i for i in range(x.ndim) if i != x.ndim - 3)
    m = x.data.size // x.shape[-3]
    mu = x.data.mean(axis=red, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=red, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = (x.data - mu) * inv
    gshape = (-1, 1, 1)
    out = xhat * gamma.data.reshape(gshape) + beta.data.reshape(gshape)

    def bwd(g):
        gxhat = g * gamma.data.reshape(gshape)
        gx = inv / m * (m * gxhat - gxhat.sum(axis=red, keepdims=True)
                        - xhat * (gxhat * xhat).sum(axis=red, keepdims=True))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)
    return _node(out, (x, gamma, beta), bwd), mu.reshape(-1), var.reshape(-1)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Var:
    x, gamma, beta = as_var(x), as_var(gamma), as_var(beta)
    d = x.shape[-1]
    if gamma.shape != (d,):
        raise DimensionMismatch(f"layer_norm: trailing dim {d} vs gamma {gamma.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def bwd(g):
        gxhat = g * gamma.data
        gx = inv / d * (d * gxhat - gxhat.sum(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True))
        return gx, g * xhat, g
    return _node(out, (x, gamma, beta), bwd)


def multi_head_attention(x, wq, wk, wv, wo, heads: int):
    """Self-attention over axis -2. Returns ``(output Var, weights array)``
    with weights shaped ``(..., heads, n, n)``."""
    x = as_var(x)
    d = x.shape[-1]
    if d % heads:
        raise DimensionMismatch(f"width {d} not divisible by {heads} heads")
    dh = d // heads
    lead = x.shape[:-2]
    n = x.shape[-2]
    nl = len(lead)

    def split(t):
        t = reshape(t, lead + (n, heads, dh))
        return swapaxes(t, nl, nl + 1)

    q, k, v = split(matmul(x, wq)), split(matmul(x, wk)), split(matmul(x, wv))
    scores = mul(matmul(q, swapaxes(k, -1, -2)), x.dtype.type(1.0 / np.sqrt(dh)))
    attn = softmax(scores)
    ctx = swapaxes(matmul(attn, v), nl, nl + 1)
    out = matmul(reshape(ctx, lead + (n, d)), wo)
    return out, attn.data


# loss / optimizer ------------------------------------------------------

BCE_CLAMP = 1e-7


def bce_loss(probs, labels) -> Var:
    """Mean binary cross-entropy with probabilities clamped to [1e-7, 1-1e-7]."""
    probs = as_var(probs)
    y = value(labels).astype(probs.dtype)
    if probs.shape != y.shape:
        raise DimensionMismatch(f"bce_loss: probs {probs.shape} vs labels {y.shape}")
    p = np.clip(probs.data, BCE_CLAMP, 1 - BCE_CLAMP)
    loss = -(y * np.log(p) + (1 - y) * np.log(1 - p)).mean()
    inside = (probs.data >= BCE_CLAMP) & (probs.data <= 1 - BCE_CLAMP)

    def bwd(g):
        return (g * inside * (p - y) / (p * (1 - p)) / y.size,)
    return _node(np.asarray(loss, dtype=probs.dtype), (probs,), bwd)


def bce_with_logits(logits, labels) -> Var:
    """``bce_loss(sigmoid(logits), labels)`` for logits inside the clamp range.

    Used for training; saturated logits keep a finite gradient."""
    return bce_loss(sigmoid(logits), labels)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: Mapping[str, np.ndarray],
              grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update. Returns new parameter arrays."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        if g.shape != p.shape:
            raise DimensionMismatch(f"grad for {name}: {g.shape} vs {p.shape}")
        dt = p.dtype.type
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = dt(b1) * m + dt(1 - b1) * g
        v = dt(b2) * v + dt(1 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        mhat = m / dt(c1)
        vhat = v / dt(c2)
        out[name] = p - dt(state.lr) * mhat / (np.sqrt(vhat) + dt(state.eps))
    return out


# gradient checking -------------------------------------------------------

@dataclass
class GradcheckReport:
    errors: dict[str, float]
    tol: float = 1e-3

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol


def _rel_err(a: np.ndarray, n: np.ndarray, floor: float) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def gradcheck(fn: Callable[[dict], Var], inputs: Mapping[str, np.ndarray], h: float = 1e-5,
              tol: float = 1e-3, max_entries: int | None = None, seed: int = 0,
              floor: float = 1e-6) -> GradcheckReport:
    """Compare analytic gradients of ``fn`` with central differences.

    ``fn`` maps a dict of Vars to a scalar Var. Inputs are promoted to
    float64. With ``max_entries`` only that many randomly chosen entries of
    each input are perturbed (all entries get analytic gradients anyway).
    """
    rng = np.random.default_rng(seed)
    base = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    vars_ = {k: Var(v.copy(), requires_grad=True) for k, v in base.items()}
    backward(fn(vars_))
    errors = {}
    for name, arr in base.items():
        analytic = vars_[name].grad
        if analytic is None:
            analytic = np.zeros_like(arr)
        flat_idx = np.arange(arr.size)
        if max_entries is not None and arr.size > max_entries:
            flat_idx = np.sort(rng.choice(arr.size, max_entries, replace=False))
        num = np.empty(len(flat_idx))
        for j, fi in enumerate(flat_idx):
            idx = np.unravel_index(fi, arr.shape)
            vals = []
            for sgn in (1.0, -1.0):
                pert = dict(base)
                a = arr.copy()
                a[idx] += sgn * h
                pert[name] = a
                with no_grad():
                    vals.append(float(fn({k: Var(v) for k, v in pert.items()}).data))
            num[j] = (vals[0] - vals[1]) / (2 * h)
        errors[name] = _rel_err(analytic.reshape(-1)[flat_idx], num, floor)
    return GradcheckReport(errors, tol)
