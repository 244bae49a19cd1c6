"""Hashed-vocabulary toy text encoder.

Stands in for a pretrained sentence encoder: anything exposing
``encode_text(TokenSequence) -> n×d_t`` features can replace it.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as A
from .errors import DataFormatError, UserInputError
from .layers import encoder_layer_init, prefixed, pre_norm_layer

PREFIX = "text."
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_WORD = re.compile(r"\w+", re.UNICODE)


@dataclass(frozen=True)
class TextEncoderConfig:
    vocab_size: int = 4096
    d_t: int = 64
    layers: int = 1
    heads: int = 4
    ff_mult: int = 2
    max_len: int = 256

    def __post_init__(self):
        if self.d_t % self.heads:
            raise UserInputError(f"d_t={self.d_t} not divisible by heads={self.heads}")


@dataclass
class TokenSequence:
    tokens: list[int] = field(default_factory=list)
    spans: list[tuple[float, float]] | None = None

    def __len__(self):
        return len(self.tokens)


@dataclass
class Utterance:
    start_s: float
    end_s: float
    text: str


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def words(text: str) -> list[str]:
    return _WORD.findall(text.lower())


def tokenize(text: str, vocab_size: int = TextEncoderConfig.vocab_size) -> TokenSequence:
    return TokenSequence([fnv1a64(w.encode("utf-8")) % vocab_size for w in words(text)])


def tokenize_utterance(u: Utterance, vocab_size: int = TextEncoderConfig.vocab_size) -> TokenSequence:
    """Tokens with spans spread evenly across the utterance interval."""
    seq = tokenize(u.text, vocab_size)
    n = len(seq.tokens)
    step = (u.end_s - u.start_s) / n if n else 0.0
    seq.spans = [(u.start_s + i * step, u.start_s + (i + 1) * step) for i in range(n)]
    return seq


def read_transcript(path) -> list[Utterance]:
    """JSON-lines: ``{"start_s": float, "end_s": float, "text": str}`` per line."""
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                u = Utterance(float(rec["start_s"]), float(rec["end_s"]), str(rec["text"]))
            except (ValueError, KeyError, TypeError) as e:
                raise DataFormatError(f"{path}:{lineno}: bad transcript record ({e})") from None
            if u.end_s < u.start_s:
                raise DataFormatError(f"{path}:{lineno}: end_s < start_s")
            out.append(u)
    return out


def write_transcript(path, utterances: list[Utterance]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for u in utterances:
            f.write(json.dumps({"start_s": u.start_s, "end_s": u.end_s, "text": u.text}) + "\n")


def init_params(cfg: TextEncoderConfig, rng: np.random.Generator, dtype=np.float32) -> dict:
    p = {
        "embed": (0.5 * rng.standard_normal((cfg.vocab_size, cfg.d_t))).astype(dtype),
        "pos": (0.1 * rng.standard_normal((cfg.max_len, cfg.d_t))).astype(dtype),
        "null": (0.1 * rng.standard_normal(cfg.d_t)).astype(dtype),
    }
    for i in range(cfg.layers):
        p.update(prefixed(f"layer{i}.", encoder_layer_init(rng, cfg.d_t, cfg.ff_mult * cfg.d_t, dtype)))
    return prefixed(PREFIX, p)


def encode_ids(ids: np.ndarray, p, cfg: TextEncoderConfig) -> A.Var:
    """Encode a ``B×n`` (or ``n``) id array; sequences longer than
    ``max_len`` are truncated."""
    ids = np.asarray(ids, dtype=np.int64)[..., :cfg.max_len]
    if np.any(ids < 0) or np.any(ids >= cfg.vocab_size):
        raise UserInputError("token id outside vocabulary")
    n = ids.shape[-1]
    x = A.embedding(p[PREFIX + "embed"], ids) + A.getitem(A.as_var(p[PREFIX + "pos"]), slice(0, n))
    for i in range(cfg.layers):
        x = pre_norm_layer(x, p, f"{PREFIX}layer{i}.", cfg.heads)
    return x


def encode_text(seq: TokenSequence, p, cfg: TextEncoderConfig) -> A.Var:
    """Per-token features, ``max(1, n) × d_t``; empty input yields the
    learned null feature."""
    if not seq.tokens:
        return A.reshape(p[PREFIX + "null"], (1, cfg.d_t))
    return encode_ids(np.asarray(seq.tokens), p, cfg)
