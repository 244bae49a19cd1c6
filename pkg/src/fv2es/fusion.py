"""Per-modality sequence encoding and weighted late fusion into six sigmoid scores."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as A
from . import tensor as T
from .errors import DimensionMismatch, UserInputError
from .layers import encoder_layer_init, linear_init, post_norm_layer, prefixed

PREFIX = "fusion."
MODALITIES = ("visual", "acoustic", "textual")
LABEL_SETS = {
    "iemocap": ("anger", "excitement", "frustration", "happiness", "neutral", "sadness"),
    "mosei": ("happiness", "sadness", "anger", "fear", "disgust", "surprise"),
}
N_CLASSES = 6


@dataclass(frozen=True)
class FusionConfig:
    d_f: int = 64
    hidden: int = 128
    heads: int = 4
    ff_mult: int = 2
    max_len: int = 512

    def __post_init__(self):
        if self.d_f % self.heads:
            raise UserInputError(f"d_f={self.d_f} not divisible by heads={self.heads}")


@dataclass
class ModalityFeatures:
    visual: np.ndarray    # n_v × feat_v
    acoustic: np.ndarray  # n_a × d
    textual: np.ndarray   # n_t × d_t


@dataclass
class EmotionScores:
    probs: np.ndarray
    label_set: str = "iemocap"

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.shape != (N_CLASSES,):
            raise DimensionMismatch(f"expected {N_CLASSES} probabilities, got {self.probs.shape}")
        if self.label_set not in LABEL_SETS:
            raise UserInputError(f"unknown label set {self.label_set!r}")

    @property
    def labels(self) -> tuple[str, ...]:
        return LABEL_SETS[self.label_set]


def init_params(cfg: FusionConfig, feat_v: int, d_a: int, d_t: int,
                rng: np.random.Generator, dtype=np.float32) -> dict:
    p = {}
    for name, width in (("v", feat_v), ("a", d_a), ("t", d_t)):
        p.update(prefixed(f"proj_{name}.", linear_init(rng, width, cfg.d_f, dtype)))
    for name in ("v", "a"):
        p.update(prefixed(f"enc_{name}.", encoder_layer_init(rng, cfg.d_f, cfg.ff_mult * cfg.d_f, dtype)))
        p[f"enc_{name}.pos"] = (0.1 * rng.standard_normal((cfg.max_len, cfg.d_f))).astype(dtype)
    p["w_mod"] = np.zeros(3, dtype)
    p.update(prefixed("head1.", linear_init(rng, 3 * cfg.d_f, cfg.hidden, dtype)))
    p.update(prefixed("head2.", linear_init(rng, cfg.hidden, N_CLASSES, dtype)))
    p["null_v"] = (0.1 * rng.standard_normal(feat_v)).astype(dtype)
    p["null_a"] = (0.1 * rng.standard_normal(d_a)).astype(dtype)
    return prefixed(PREFIX, p)


def encode_sequence(x, p, modality: str, heads: int) -> A.Var:
    """Learned positions + one post-norm transformer encoder layer over axis -2."""
    pre = f"{PREFIX}enc_{modality}."
    x = A.as_var(x)
    n = x.shape[-2]
    if n > p[pre + "pos"].shape[0]:
        raise DimensionMismatch(f"sequence of {n} exceeds {p[pre + 'pos'].shape[0]} positions")
    x = x + A.getitem(A.as_var(p[pre + "pos"]), slice(0, n))
    return post_norm_layer(x, p, pre, heads)


def modality_weights(p) -> A.Var:
    return A.softmax(A.as_var(p[PREFIX + "w_mod"]))


def fuse_pooled(pooled_v, pooled_a, pooled_t, p) -> A.Var:
    """Weight each pooled ``B×d_f`` vector by softmax(w), concatenate, run the head."""
    w = modality_weights(p)
    parts = [A.mul(v, A.getitem(w, i)) for i, v in enumerate((pooled_v, pooled_a, pooled_t))]
    h = A.relu(A.linear(A.concat(parts, axis=-1), p[PREFIX + "head1.w"], p[PREFIX + "head1.b"]))
    return A.linear(h, p[PREFIX + "head2.w"], p[PREFIX + "head2.b"])


def fuse_logits(visual, acoustic, textual, p, cfg: FusionConfig) -> A.Var:
    """Batched core: ``B×n_v×feat_v``, ``B×n_a×d``, ``B×n_t×d_t`` → ``B×6`` logits."""
    pooled = []
    for key, feats in (("v", visual), ("a", acoustic)):
        proj = A.linear(feats, p[f"{PREFIX}proj_{key}.w"], p[f"{PREFIX}proj_{key}.b"])
        pooled.append(A.mean(encode_sequence(proj, p, key, cfg.heads), axis=-2))
    proj_t = A.linear(textual, p[PREFIX + "proj_t.w"], p[PREFIX + "proj_t.b"])
    pooled.append(A.mean(proj_t, axis=-2))
    return fuse_pooled(*pooled, p)


def fuse_and_predict(m: ModalityFeatures, p, cfg: FusionConfig,
                     label_set: str = "iemocap") -> tuple[np.ndarray, EmotionScores]:
    for name in MODALITIES:
        arr = A.value(getattr(m, name))
        if arr.ndim != 2 or arr.shape[0] < 1:
            raise DimensionMismatch(f"{name} features must be n×width with n >= 1, got {arr.shape}")
    with A.no_grad():
        logits = fuse_logits(*(A.reshape(getattr(m, k), (1,) + A.value(getattr(m, k)).shape)
                               for k in MODALITIES), p, cfg).data[0]
    return logits, EmotionScores(T.sigmoid(logits.astype(np.float64)), label_set)


def predict_labels(scores: EmotionScores | np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Independent per-class decisions, ``prob >= threshold``; threshold clamped to [0, 1]."""
    probs = scores.probs if isinstance(scores, EmotionScores) else np.asarray(scores)
    thr = min(max(float(threshold), 0.0), 1.0)
    return (probs >= thr).astype(np.int64)
