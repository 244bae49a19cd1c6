"""Toy end-to-end training on the synthetic task."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as A
from . import vision
from .fusion import LABEL_SETS
from .metrics import EvalReport, evaluate
from .model import Model, ModelConfig
from .synthetic import Batch, sample_batch

log = logging.getLogger(__name__)

REPLICATION_LR = 4.5e-6
REPLICATION_EPOCHS = 30
REPLICATION_BATCH = 8


@dataclass
class TrainConfig:
    steps: int = 200
    batch: int = 8
    lr: float = 1e-3
    seed: int = 0
    bn_momentum: float = 0.1
    n_frames: int = 2
    n_words: int = 5

    @classmethod
    def replication(cls, **kw) -> "TrainConfig":
        """Optimizer settings used for the full-scale datasets."""
        return cls(lr=REPLICATION_LR, batch=REPLICATION_BATCH, **kw)


@dataclass
class TrainResult:
    model: Model
    losses: list[float] = field(default_factory=list)


def loss_and_grads(model: Model, batch: Batch, training: bool = True):
    """BCE of the batch and gradients for every trainable tensor."""
    trainable = set(model.trainable_names())
    p = {k: A.Var(v, requires_grad=k in trainable) for k, v in model.params.items()}
    stats: dict = {}
    logits = model.logits_batch(batch.spectra, batch.frames, batch.ids, p, training, stats)
    loss = A.bce_loss(A.sigmoid(logits), batch.labels)
    A.backward(loss)
    grads = {k: p[k].grad if p[k].grad is not None else np.zeros_like(v)
             for k, v in model.params.items() if k in trainable}
    return float(loss.data), grads, stats


def update_running_stats(params: dict, stats: dict, momentum: float) -> None:
    for key, (mu, var) in stats.items():
        params[key + ".mean"] = ((1 - momentum) * params[key + ".mean"] + momentum * mu).astype(np.float32)
        params[key + ".var"] = ((1 - momentum) * params[key + ".var"] + momentum * var).astype(np.float32)


def train_toy(cfg: ModelConfig | None = None, tc: TrainConfig | None = None,
              init_seed: int | None = None) -> TrainResult:
    cfg = cfg or ModelConfig.toy()
    tc = tc or TrainConfig()
    model = Model.init(cfg, tc.seed if init_seed is None else init_seed)
    rng = np.random.default_rng([tc.seed, 1])
    state = A.AdamState(lr=tc.lr)
    losses = []
    trainable = model.trainable_names()
    for step in range(tc.steps):
        batch = sample_batch(rng, cfg, tc.batch, tc.n_frames, tc.n_words)
        loss, grads, stats = loss_and_grads(model, batch)
        losses.append(loss)
        new = A.adam_step(state, {k: model.params[k] for k in trainable}, grads)
        model.params.update(new)
        update_running_stats(model.params, stats, tc.bn_momentum)
        if step % 20 == 0:
            log.info("step %d loss %.4f", step, loss)
    return TrainResult(model, losses)


def heldout_batch(cfg: ModelConfig, n: int = 64, seed: int = 12345, tc: TrainConfig | None = None) -> Batch:
    tc = tc or TrainConfig()
    return sample_batch(np.random.default_rng([seed, 2]), cfg, n, tc.n_frames, tc.n_words)


def predict_batch(model: Model, batch: Batch) -> np.ndarray:
    with A.no_grad():
        logits = model.logits_batch(batch.spectra, batch.frames, batch.ids).data
    return 1.0 / (1.0 + np.exp(-logits.astype(np.float64)))


def evaluate_batch(model: Model, batch: Batch, threshold: float = 0.5) -> EvalReport:
    preds = (predict_batch(model, batch) >= threshold).astype(np.int64)
    return evaluate(preds, batch.labels, list(LABEL_SETS[model.cfg.label_set]))
