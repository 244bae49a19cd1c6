"""Dense tensor kernels on top of numpy arrays.

All reductions that matter for bit-reproducibility (matmul, convolution)
accumulate in a fixed left-to-right order, one term at a time, so results
match a naive scalar loop exactly and do not depend on batch size, BLAS
backend or thread count.

Arrays are float32 by default; float64 is used for gradient checking.
Leading batch dimensions are accepted wherever the op is naturally batched.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import DimensionMismatch, NonFiniteError

F32 = np.float32
F64 = np.float64


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {what}")
    return x


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        c = len(self.gamma)
        for name in ("beta", "running_mean", "running_var"):
            if len(getattr(self, name)) != c:
                raise DimensionMismatch(f"BatchNormParams.{name} length != {c}")
        if np.any(np.asarray(self.running_var) < 0):
            raise ValueError("running_var must be non-negative")

    @property
    def channels(self) -> int:
        return len(self.gamma)

    @classmethod
    def identity(cls, channels: int, dtype=F32, eps: float = 0.0) -> "BatchNormParams":
        return cls(
            np.ones(channels, dtype), np.zeros(channels, dtype),
            np.zeros(channels, dtype), np.ones(channels, dtype), eps,
        )


@dataclass
class LayerNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        if len(self.gamma) != len(self.beta):
            raise DimensionMismatch("LayerNormParams gamma/beta length differ")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product over the last two axes with fixed summation order.

    ``out[..., i, j] = ((a[i,0]*b[0,j] + a[i,1]*b[1,j]) + ...)``, evaluated
    term by term. Leading axes broadcast.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionMismatch(f"matmul needs rank >= 2, got {a.shape} and {b.shape}")
    k = a.shape[-1]
    if b.shape[-2] != k:
        raise DimensionMismatch(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if k == 0:
        shape = np.broadcast_shapes(a.shape[:-2], b.shape[:-2]) + (a.shape[-2], b.shape[-1])
        return np.zeros(shape, np.result_type(a, b))
    out = a[..., :, 0:1] * b[..., 0:1, :]
    tmp = np.empty_like(out)
    for i in range(1, k):
        np.multiply(a[..., :, i:i + 1], b[..., i:i + 1, :], out=tmp)
        out += tmp
    return out


def out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise DimensionMismatch(f"expected C×H×W or N×C×H×W, got shape {x.shape}")


def im2col(x: np.ndarray, k: int, stride: int, pad: int, fill: float = 0.0) -> np.ndarray:
    """Unfold N×C×H×W into N×(C·k·k)×(H'·W'), rows ordered (c, ky, kx)."""
    n, c, h, w = x.shape
    if h + 2 * pad < k or w + 2 * pad < k:
        raise DimensionMismatch(f"input {h}×{w} with pad {pad} smaller than kernel {k}")
    ho, wo = out_size(h, k, stride, pad), out_size(w, k, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=fill)
    cols = np.empty((n, c, k * k, ho, wo), dtype=x.dtype)
    for ky in range(k):
        for kx in range(k):
            cols[:, :, ky * k + kx] = x[:, :, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride]
    return cols.reshape(n, c * k * k, ho * wo)


def col2im(cols: np.ndarray, shape: tuple, k: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of :func:`im2col` (scatter-add back to N×C×H×W)."""
    n, c, h, w = shape
    ho, wo = out_size(h, k, stride, pad), out_size(w, k, stride, pad)
    cols = cols.reshape(n, c, k * k, ho, wo)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for ky in range(k):
        for kx in range(k):
            out[:, :, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride] += cols[:, :, ky * k + kx]
    return out[:, :, pad:pad + h, pad:pad + w]


def conv2d(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray | None = None,
           stride: int = 1, pad: int = 0) -> np.ndarray:
    """2-D cross-correlation (no kernel flip) with zero padding.

    Each output is accumulated over (c_in, ky, kx) in lexicographic order,
    then the bias is added.
    """
    xb, squeeze = _as_batch(np.asarray(x))
    cout, cin, k, k2 = kernel.shape
    if k != k2:
        raise DimensionMismatch("kernel must be square")
    if xb.shape[1] != cin:
        raise DimensionMismatch(f"input has {xb.shape[1]} channels, kernel expects {cin}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    n, _, h, w = xb.shape
    ho, wo = out_size(h, k, stride, pad), out_size(w, k, stride, pad)
    cols = im2col(xb, k, stride, pad)
    out = matmul(kernel.reshape(cout, cin * k * k), cols)
    if bias is not None:
        if bias.shape != (cout,):
            raise DimensionMismatch(f"bias shape {bias.shape} != ({cout},)")
        out = out + bias[:, None]
    out = out.reshape(n, cout, ho, wo)
    return out[0] if squeeze else out


def maxpool2d(x: np.ndarray, k: int, stride: int, pad: int = 0) -> np.ndarray:
    xb, squeeze = _as_batch(np.asarray(x))
    n, c, h, w = xb.shape
    ho, wo = out_size(h, k, stride, pad), out_size(w, k, stride, pad)
    cols = im2col(xb, k, stride, pad, fill=-np.inf).reshape(n, c, k * k, ho, wo)
    out = cols.max(axis=2)
    return out[0] if squeeze else out


def batch_norm_eval(x: np.ndarray, p: BatchNormParams) -> np.ndarray:
    channel_axis = x.ndim - 3
    if x.ndim not in (3, 4) or x.shape[channel_axis] != p.channels:
        raise DimensionMismatch(f"batch_norm: input {x.shape} vs {p.channels} channels")
    std = np.sqrt(p.running_var + p.eps)
    return (x - p.running_mean[:, None, None]) / std[:, None, None] \
        * p.gamma[:, None, None] + p.beta[:, None, None]


def layer_norm(x: np.ndarray, p: LayerNormParams) -> np.ndarray:
    d = x.shape[-1]
    if len(p.gamma) != d:
        raise DimensionMismatch(f"layer_norm: trailing dim {d} != {len(p.gamma)}")
    mean = x.mean(axis=-1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + p.eps) * p.gamma + p.beta


_INV_SQRT2 = 0.7071067811865476


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact GELU, ``x * Phi(x)``."""
    return x * (0.5 * (1.0 + erf(x * _INV_SQRT2))).astype(x.dtype)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return (0.5 * (1.0 + np.tanh(0.5 * x))).astype(x.dtype, copy=False)


def softmax(x: np.ndarray) -> np.ndarray:
    if x.shape[-1] < 1:
        raise DimensionMismatch("softmax over an empty axis")
    # normalise in f64 so each stored probability is correctly rounded
    e = np.exp(x - x.max(axis=-1, keepdims=True)).astype(np.float64)
    return (e / e.sum(axis=-1, keepdims=True)).astype(x.dtype, copy=False)


@dataclass
class AttentionParams:
    """Bias-free projections; tokens are rows, so ``q = x @ wq``."""
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    heads: int = 1


def split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    *lead, n, d = x.shape
    return np.swapaxes(x.reshape(*lead, n, heads, d // heads), -2, -3)


def merge_heads(x: np.ndarray) -> np.ndarray:
    *lead, h, n, dh = x.shape
    return np.swapaxes(x, -2, -3).reshape(*lead, n, h * dh)


def multi_head_attention(tokens: np.ndarray, wq, wk, wv, wo, heads: int,
                         return_weights: bool = False):
    """Scaled dot-product self-attention over the second-to-last axis.

    Returns the ``n×d`` output, plus the ``heads×n×n`` weights when asked.
    """
    d = tokens.shape[-1]
    if d % heads:
        raise DimensionMismatch(f"width {d} not divisible by {heads} heads")
    dh = d // heads
    q = split_heads(matmul(tokens, wq), heads)
    k = split_heads(matmul(tokens, wk), heads)
    v = split_heads(matmul(tokens, wv), heads)
    scores = matmul(q, np.swapaxes(k, -1, -2)) * tokens.dtype.type(1.0 / np.sqrt(dh))
    attn = softmax(scores)
    out = matmul(merge_heads(matmul(attn, v)), wo)
    return (out, attn) if return_weights else out
