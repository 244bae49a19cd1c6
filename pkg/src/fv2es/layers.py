"""Parameter initialisers and the standard transformer encoder layers."""
from __future__ import annotations

import numpy as np

from . import autodiff as A


def linear_init(rng, fan_in: int, fan_out: int, dtype=np.float32, bias: bool = True) -> dict:
    p = {"w": (rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)).astype(dtype)}
    if bias:
        p["b"] = np.zeros(fan_out, dtype)
    return p


def encoder_layer_init(rng, d: int, ff: int, dtype=np.float32) -> dict:
    p = {}
    for w in ("wq", "wk", "wv", "wo"):
        p[w] = (rng.standard_normal((d, d)) / np.sqrt(d)).astype(dtype)
    for ln in ("ln1", "ln2"):
        p[ln + ".g"] = np.ones(d, dtype)
        p[ln + ".b"] = np.zeros(d, dtype)
    for k, v in linear_init(rng, d, ff, dtype).items():
        p["ff1." + k] = v
    for k, v in linear_init(rng, ff, d, dtype).items():
        p["ff2." + k] = v
    return p


def prefixed(prefix: str, p: dict) -> dict:
    return {prefix + k: v for k, v in p.items()}


def _ffn(x, p, pre):
    h = A.gelu(A.linear(x, p[pre + "ff1.w"], p[pre + "ff1.b"]))
    return A.linear(h, p[pre + "ff2.w"], p[pre + "ff2.b"])


def _attn(x, p, pre, heads):
    out, _ = A.multi_head_attention(x, p[pre + "wq"], p[pre + "wk"], p[pre + "wv"], p[pre + "wo"], heads)
    return out


def post_norm_layer(x, p, pre: str, heads: int) -> A.Var:
    """Original transformer wiring: ``LN2(h + FFN(h))`` with ``h = LN1(x + MSA(x))``."""
    h = A.layer_norm(x + _attn(x, p, pre, heads), p[pre + "ln1.g"], p[pre + "ln1.b"])
    return A.layer_norm(h + _ffn(h, p, pre), p[pre + "ln2.g"], p[pre + "ln2.b"])


def pre_norm_layer(x, p, pre: str, heads: int) -> A.Var:
    """``x + MSA(LN1(x))`` then ``+ FFN(LN2(.))``."""
    x = x + _attn(A.layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"]), p, pre, heads)
    return x + _ffn(A.layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"]), p, pre)
