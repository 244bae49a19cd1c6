"""Hierarchical attention over a square spectrum.

The spectrum is cut into a 4×4 grid of S×S patches. Each patch is a block of
``sub²`` tokens (embedded sub-patches) that attend only to each other. After
each transformer layer, 2×2 neighbouring blocks are merged by a 3×3 conv,
layer norm over channels and a stride-2 3×3 max pool, giving a 16 → 4 → 1
block pyramid. The acoustic feature is the mean of the last block's tokens.

Parameters live in a flat ``{name: array}`` dict under the ``tower.`` prefix.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as A
from . import fvt1
from .errors import BadLayer, BadShape

PREFIX = "tower."


@dataclass(frozen=True)
class SpectrumTowerConfig:
    side: int = 64
    d: int = 64
    heads: int = 4
    sub: int = 4

    def __post_init__(self):
        if self.side <= 0 or self.side % 4:
            raise BadShape(f"side must be a positive multiple of 4, got {self.side}")
        if self.patch % self.sub:
            raise BadShape(f"patch side {self.patch} not divisible by sub={self.sub}")
        if self.d % self.heads:
            raise BadShape(f"d={self.d} not divisible by heads={self.heads}")

    @property
    def patch(self) -> int:
        return self.side // 4

    @property
    def piece(self) -> int:
        """Side of one sub-patch (one token)."""
        return self.patch // self.sub

    @property
    def tokens(self) -> int:
        return self.sub * self.sub


@dataclass
class PatchGrid:
    layer: int
    grid: int  # blocks per side: 4, 2, 1
    tokens: A.Var  # B × grid² × sub² × d

    @property
    def blocks(self) -> int:
        return self.grid * self.grid


@dataclass
class AttentionMaps:
    """``layers[l]`` has shape ``(blocks, heads, n, n)`` (with a leading
    batch axis when the tower ran on a batch)."""
    layers: list = field(default_factory=list)

    def counts(self) -> list[int]:
        return [m.shape[-4] for m in self.layers]

    def items(self):
        for li, maps in enumerate(self.layers, start=1):
            for bi in range(maps.shape[-4]):
                yield li, bi, maps[..., bi, :, :, :]


def init_params(cfg: SpectrumTowerConfig, rng: np.random.Generator, dtype=np.float32) -> dict:
    d = cfg.d

    def normal(shape, fan_in):
        return (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(dtype)

    p = {
        "embed.w": normal((cfg.piece * cfg.piece, d), cfg.piece * cfg.piece),
        "embed.b": np.zeros(d, dtype),
        "pos": (0.1 * rng.standard_normal((cfg.tokens, d))).astype(dtype),
    }
    for layer in (1, 2, 3):
        for w in ("wq", "wk", "wv", "wo"):
            p[f"layer{layer}.{w}"] = normal((d, d), d)
        p[f"layer{layer}.ln.g"] = np.ones(d, dtype)
        p[f"layer{layer}.ln.b"] = np.zeros(d, dtype)
    for agg in (1, 2):
        p[f"agg{agg}.conv.w"] = normal((d, d, 3, 3), 9 * d)
        p[f"agg{agg}.conv.b"] = np.zeros(d, dtype)
        p[f"agg{agg}.ln.g"] = np.ones(d, dtype)
        p[f"agg{agg}.ln.b"] = np.zeros(d, dtype)
    return {PREFIX + k: v for k, v in p.items()}


def partition_patches(spec, cfg: SpectrumTowerConfig, p) -> PatchGrid:
    """Cut ``side×side`` (or ``B×side×side``) into 16 blocks of embedded
    sub-patch tokens, both in raster order."""
    spec = A.as_var(spec)
    if spec.ndim == 2:
        spec = A.reshape(spec, (1,) + spec.shape)
    if spec.ndim != 3 or spec.shape[1:] != (cfg.side, cfg.side):
        raise BadShape(f"expected {cfg.side}×{cfg.side} spectrum, got {spec.shape}")
    b, sub, pc = spec.shape[0], cfg.sub, cfg.piece
    # side = 4 · sub · piece along each axis
    x = A.reshape(spec, (b, 4, sub, pc, 4, sub, pc))
    x = A.transpose(x, (0, 1, 4, 2, 5, 3, 6))
    x = A.reshape(x, (b, 16, cfg.tokens, pc * pc))
    tokens = A.linear(x, p[PREFIX + "embed.w"], p[PREFIX + "embed.b"]) + p[PREFIX + "pos"]
    return PatchGrid(1, 4, tokens)


def transformer_layer(tokens, p, layer: int, heads: int):
    """``GELU(LN(x + MSA(x)))`` over the token axis. Returns (output, weights)."""
    pre = f"{PREFIX}layer{layer}."
    x = A.as_var(tokens)
    att, weights = A.multi_head_attention(x, p[pre + "wq"], p[pre + "wk"], p[pre + "wv"],
                                          p[pre + "wo"], heads)
    out = A.gelu(A.layer_norm(x + att, p[pre + "ln.g"], p[pre + "ln.b"]))
    return out, weights


def aggregate(grid: PatchGrid, cfg: SpectrumTowerConfig, p) -> PatchGrid:
    """Merge each 2×2 neighbourhood of blocks: conv3×3 → LN(channels) → maxpool3×3/2."""
    if grid.layer >= 3 or grid.grid < 2:
        raise BadLayer(f"cannot aggregate layer {grid.layer} ({grid.grid}×{grid.grid} grid)")
    pre = f"{PREFIX}agg{grid.layer}."
    t = grid.tokens
    b, d, sub, g2 = t.shape[0], t.shape[-1], cfg.sub, grid.grid // 2
    x = A.reshape(t, (b, g2, 2, g2, 2, sub, sub, d))
    # → (b, g2y, g2x, d, by, ty, bx, tx)
    x = A.transpose(x, (0, 1, 3, 7, 2, 5, 4, 6))
    x = A.reshape(x, (b * g2 * g2, d, 2 * sub, 2 * sub))
    x = A.conv2d(x, p[pre + "conv.w"], p[pre + "conv.b"], stride=1, pad=1)
    x = A.transpose(x, (0, 2, 3, 1))
    x = A.layer_norm(x, p[pre + "ln.g"], p[pre + "ln.b"])
    x = A.transpose(x, (0, 3, 1, 2))
    x = A.maxpool2d(x, 3, 2, 1)
    x = A.transpose(x, (0, 2, 3, 1))
    return PatchGrid(grid.layer + 1, g2, A.reshape(x, (b, g2 * g2, sub * sub, d)))


def forward_tower(spec, cfg: SpectrumTowerConfig, p) -> tuple[A.Var, AttentionMaps]:
    """Run the 3-level pyramid. Returns the ``d`` feature (``B×d`` for a
    batch) and all attention maps."""
    batched = A.value(spec).ndim == 3
    grid = partition_patches(spec, cfg, p)
    maps = AttentionMaps()
    for layer in (1, 2, 3):
        out, weights = transformer_layer(grid.tokens, p, layer, cfg.heads)
        maps.layers.append(weights if batched else weights[0])
        grid = PatchGrid(layer, grid.grid, out)
        if layer < 3:
            grid = aggregate(grid, cfg, p)
    feature = A.mean(A.reshape(grid.tokens, (grid.tokens.shape[0], cfg.tokens, cfg.d)), axis=1)
    return (feature if batched else A.reshape(feature, (cfg.d,))), maps


def render_pgm(att: np.ndarray) -> bytes:
    """Binary PGM of a head-averaged ``n×n`` map, min-max scaled to 0..255.

    A constant map renders as uniform mid-gray."""
    m = att.mean(axis=0) if att.ndim == 3 else att
    lo, hi = float(m.min()), float(m.max())
    if hi - lo <= 1e-12:
        px = np.full(m.shape, 128, np.uint8)
    else:
        px = np.round((m - lo) / (hi - lo) * 255.0).astype(np.uint8)
    h, w = px.shape
    return f"P5\n{w} {h}\n255\n".encode() + px.tobytes()


def export_attention(maps: AttentionMaps, out_dir: str | os.PathLike) -> list[Path]:
    """Write ``layer<L>_block<k>.fvt1`` and ``.pgm`` for every block map."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for layer, block, att in maps.items():
        if att.ndim != 3:
            raise BadShape("export_attention expects maps from a single spectrum")
        stem = out / f"layer{layer}_block{block:02d}"
        fvt1.save(stem.with_suffix(".fvt1"), np.ascontiguousarray(att))
        stem.with_suffix(".pgm").write_bytes(render_pgm(att))
        written += [stem.with_suffix(".fvt1"), stem.with_suffix(".pgm")]
    return written
