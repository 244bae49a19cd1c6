"""Finite-difference gradient suite over every differentiable op and the model.

Each case maps a dict of float64 Vars to a scalar; non-scalar op outputs are
contracted with a fixed random weight tensor so every output entry matters.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as A
from . import fusion, spectrum, text
from . import tensor as T
from .fusion import FusionConfig
from .model import Model, ModelConfig
from .spectrum import SpectrumTowerConfig
from .synthetic import sample_batch
from .text import TextEncoderConfig


@dataclass
class Case:
    name: str
    fn: Callable[[dict], A.Var]
    inputs: dict
    max_entries: int | None = None


@dataclass
class CaseResult:
    name: str
    max_error: float
    passed: bool


def _contract(out: A.Var, seed: int) -> A.Var:
    w = np.random.default_rng(seed).standard_normal(out.shape)
    return A.reduce_sum(out * w)


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, x + np.sign(x + 1e-12) * margin, x)


def op_cases(seed: int = 0) -> list[Case]:
    rng = np.random.default_rng(seed)
    r = rng.standard_normal
    c = _contract
    ids = np.array([[1, 3, 3], [0, 2, 4]])
    labels = rng.integers(0, 2, (2, 6)).astype(np.float64)
    return [
        Case("add", lambda v: c(v["a"] + v["b"], 1), {"a": r((3, 4)), "b": r(4)}),
        Case("mul", lambda v: c(v["a"] * v["b"], 2), {"a": r((3, 4)), "b": r((3, 1))}),
        Case("neg", lambda v: c(-v["a"], 3), {"a": r(5)}),
        Case("relu", lambda v: c(A.relu(v["a"]), 4), {"a": _away_from_zero(rng, (4, 5))}),
        Case("gelu", lambda v: c(A.gelu(v["a"]), 5), {"a": r((4, 5))}),
        Case("sigmoid", lambda v: c(A.sigmoid(v["a"]), 6), {"a": r((4, 5))}),
        Case("softmax", lambda v: c(A.softmax(v["a"]), 7), {"a": r((3, 5))}),
        Case("reshape", lambda v: c(A.reshape(v["a"], (6, 2)), 8), {"a": r((3, 4))}),
        Case("transpose", lambda v: c(A.transpose(v["a"], (2, 0, 1)), 9), {"a": r((2, 3, 4))}),
        Case("getitem", lambda v: c(v["a"][1:, ::2], 10), {"a": r((3, 5))}),
        Case("concat", lambda v: c(A.concat([v["a"], v["b"]], axis=0), 11), {"a": r((2, 3)), "b": r((1, 3))}),
        Case("stack", lambda v: c(A.stack([v["a"], v["b"]], axis=1), 12), {"a": r((2, 3)), "b": r((2, 3))}),
        Case("sum", lambda v: c(A.reduce_sum(v["a"], axis=1), 13), {"a": r((3, 4))}),
        Case("mean", lambda v: c(A.mean(v["a"], axis=0, keepdims=True), 14), {"a": r((3, 4))}),
        Case("embedding", lambda v: c(A.embedding(v["e"], ids), 15), {"e": r((5, 3))}),
        Case("matmul", lambda v: c(A.matmul(v["a"], v["b"]), 16), {"a": r((2, 3, 4)), "b": r((4, 5))}),
        Case("linear", lambda v: c(A.linear(v["x"], v["w"], v["b"]), 17),
             {"x": r((3, 4)), "w": r((4, 2)), "b": r(2)}),
        Case("conv2d", lambda v: c(A.conv2d(v["x"], v["w"], v["b"], stride=1, pad=1), 18),
             {"x": r((2, 2, 5, 5)), "w": r((3, 2, 3, 3)), "b": r(3)}),
        Case("conv2d_stride2", lambda v: c(A.conv2d(v["x"], v["w"], None, stride=2, pad=0), 19),
             {"x": r((1, 2, 5, 5)), "w": r((2, 2, 1, 1))}),
        Case("maxpool2d", lambda v: c(A.maxpool2d(v["x"], 3, 2, 1), 20),
             {"x": rng.permutation(50).reshape(1, 2, 5, 5) * 0.1}),
        Case("batch_norm", lambda v: c(A.batch_norm(v["x"], v["g"], v["b"], np.array([0.1, -0.2]),
                                                    np.array([0.5, 2.0])), 21),
             {"x": r((2, 2, 3, 3)), "g": r(2), "b": r(2)}),
        Case("batch_norm_train", lambda v: c(A.batch_norm_train(v["x"], v["g"], v["b"])[0], 22),
             {"x": r((3, 2, 2, 2)), "g": r(2), "b": r(2)}),
        Case("layer_norm", lambda v: c(A.layer_norm(v["x"], v["g"], v["b"]), 23),
             {"x": r((3, 6)), "g": r(6), "b": r(6)}),
        Case("attention", lambda v: c(A.multi_head_attention(v["x"], v["wq"], v["wk"], v["wv"], v["wo"], 2)[0], 24),
             {"x": r((2, 3, 4)), "wq": r((4, 4)), "wk": r((4, 4)), "wv": r((4, 4)), "wo": r((4, 4))}),
        Case("bce_loss", lambda v: A.bce_loss(A.sigmoid(v["z"]), labels), {"z": r((2, 6))}),
        Case("bce_with_logits", lambda v: A.bce_with_logits(v["z"], labels), {"z": r((2, 6))}),
    ]


def _f64(p: dict) -> dict:
    return {k: np.asarray(v, np.float64) for k, v in p.items()}


def model_cases(seed: int = 0, max_entries: int = 4) -> list[Case]:
    rng = np.random.default_rng(seed)
    cases = []

    tcfg = SpectrumTowerConfig(side=8, d=4, heads=2, sub=2)
    tp = _f64(spectrum.init_params(tcfg, rng))
    spec = rng.standard_normal((8, 8))
    cases.append(Case("spectrum_tower",
                      lambda v: _contract(spectrum.forward_tower(spec, tcfg, v)[0], 30), tp))

    xcfg = TextEncoderConfig(vocab_size=16, d_t=8, layers=1, heads=2, max_len=8)
    xp = _f64(text.init_params(xcfg, rng))
    toks = np.array([[3, 7, 11]])
    cases.append(Case("text_encoder", lambda v: _contract(text.encode_ids(toks, v, xcfg), 31), xp))

    fcfg = FusionConfig(d_f=8, hidden=8, heads=2, max_len=8)
    fp = _f64(fusion.init_params(fcfg, 5, 4, 8, rng))
    fp[fusion.PREFIX + "w_mod"] = rng.standard_normal(3) * 0.5
    vis, aco, txt = rng.standard_normal((2, 3, 5)), rng.standard_normal((2, 1, 4)), rng.standard_normal((2, 2, 8))
    flab = rng.integers(0, 2, (2, 6))
    cases.append(Case("fusion_head", lambda v: A.bce_loss(A.sigmoid(fusion.fuse_logits(vis, aco, txt, v, fcfg)),
                                                          flab), fp))

    cfg = ModelConfig.toy()
    model = Model.init(cfg, seed)
    batch = sample_batch(np.random.default_rng([seed, 3]), cfg, 2)
    trainable = set(model.trainable_names())
    frozen = {k: np.asarray(v, np.float64) for k, v in model.params.items() if k not in trainable}

    def full(v):
        p = dict(frozen)
        p.update(v)
        logits = model.logits_batch(batch.spectra, batch.frames, batch.ids, p, training=True, stats={})
        return A.bce_loss(A.sigmoid(logits), batch.labels)
    cases.append(Case("toy_model", full, {k: np.asarray(model.params[k], np.float64) for k in sorted(trainable)},
                      max_entries))
    return cases


def _buggy_gelu(a) -> A.Var:
    """GELU whose backward drops the ``x·pdf(x)`` term."""
    a = A.as_var(a)
    x = a.data
    cdf = 0.5 * (1.0 + T.erf(x * T._INV_SQRT2))
    return A._node(T.gelu(x), (a,), lambda g: (g * cdf,))


@contextlib.contextmanager
def injected_bug():
    original = A.gelu
    A.gelu = _buggy_gelu
    try:
        yield
    finally:
        A.gelu = original


def run_suite(inject_bug: bool = False, seed: int = 0, include_model: bool = True,
              h: float = 1e-5, tol: float = 1e-3) -> list[CaseResult]:
    ctx = injected_bug() if inject_bug else contextlib.nullcontext()
    results = []
    with ctx:
        cases = op_cases(seed) + (model_cases(seed) if include_model else [])
        for case in cases:
            rep = A.gradcheck(case.fn, case.inputs, h=h, tol=tol, max_entries=case.max_entries, seed=seed)
            results.append(CaseResult(case.name, rep.max_error, rep.passed))
    return results


def format_results(results: list[CaseResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{r.name:<{width}}  max rel err {r.max_error:.3e}  {'ok' if r.passed else 'FAIL'}" for r in results]
    n_ok = sum(r.passed for r in results)
    lines.append(f"{n_ok}/{len(results)} passed")
    return "\n".join(lines)
