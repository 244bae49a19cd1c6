"""Timing harness: multi-branch vs fused vision stack, integrated vs pre-mode pipeline.

All numeric kernels here are single-threaded numpy ufunc loops, so both
sides of each comparison run on one core.
"""
from __future__ import annotations

import tempfile
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as A
from . import vision
from .errors import UserInputError
from .model import Model
from .pipeline import run_video
from .synthetic import synth_assets

# full-scale reference figures, reported but never asserted
REFERENCE_SPEEDUP_IEMOCAP = 0.5195
REFERENCE_SPEEDUP_MOSEI = 0.2142
REFERENCE_SPEEDUP_PIPELINE = 0.6304


@dataclass
class Timing:
    median: float
    p10: float
    p90: float
    runs: int

    @classmethod
    def of(cls, samples: list[float]) -> "Timing":
        a = np.asarray(samples)
        return cls(float(np.median(a)), float(np.percentile(a, 10)), float(np.percentile(a, 90)), len(a))


def time_fn(fn, iters: int = 30, warmup: int = 5) -> Timing:
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(iters):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return Timing.of(samples)


def time_pair(fa, fb, iters: int = 30, warmup: int = 5) -> tuple[Timing, Timing]:
    """Time two callables interleaved, alternating which goes first, so that
    machine-level drift lands on both equally."""
    for _ in range(warmup):
        fa()
        fb()
    sa, sb = [], []
    for i in range(iters):
        for fn, out in ((fa, sa), (fb, sb)) if i % 2 == 0 else ((fb, sb), (fa, sa)):
            t0 = time.perf_counter()
            fn()
            out.append(time.perf_counter() - t0)
    return Timing.of(sa), Timing.of(sb)


def speedup(slow: Timing, fast: Timing) -> float:
    """``(t_slow - t_fast) / t_slow`` on medians."""
    return (slow.median - fast.median) / slow.median


@dataclass
class BenchReport:
    vision: dict = field(default_factory=dict)
    pipeline: dict = field(default_factory=dict)
    reference_context: dict = field(default_factory=lambda: {
        "vision_speedup_iemocap": REFERENCE_SPEEDUP_IEMOCAP,
        "vision_speedup_mosei": REFERENCE_SPEEDUP_MOSEI,
        "pipeline_speedup": REFERENCE_SPEEDUP_PIPELINE,
    })

    def to_dict(self) -> dict:
        return asdict(self)


def check_same_architecture(train: Model, fused: Model) -> None:
    if train.mode != "train" or fused.mode != "fused":
        raise UserInputError("expected one train-mode and one fused checkpoint")
    if train.cfg != fused.cfg:
        raise UserInputError("checkpoints describe different architectures")


def bench_vision(train_params: dict, fused_params: dict, cfg: vision.VisionNetConfig, batch: int = 8,
                 iters: int = 30, warmup: int = 5, seed: int = 0) -> dict:
    x = np.random.default_rng(seed).random((batch, cfg.in_channels, cfg.side, cfg.side)).astype(np.float32)

    def run(p):
        with A.no_grad():
            return vision.net_forward(x, p, cfg).data

    t_train, t_fused = time_pair(lambda: run(train_params), lambda: run(fused_params), iters, warmup)
    residual = float(np.max(np.abs(run(train_params) - run(fused_params))))
    f_train = vision.flops(cfg, "train", batch=batch)
    f_fused = vision.flops(cfg, "fused", batch=batch)
    return {
        "batch": batch, "side": cfg.side, "iters": iters, "warmup": warmup,
        "train": asdict(t_train), "fused": asdict(t_fused),
        "speedup": speedup(t_train, t_fused),
        "flops": {"train": f_train, "fused": f_fused},
        "params": {"train": vision.count_params(cfg, "train")["total"],
                   "fused": vision.count_params(cfg, "fused")["total"]},
        "max_abs_residual": residual,
    }


def bench_pipeline(model: Model, seconds: float = 60.0, iters: int = 10, warmup: int = 1,
                   seg_seconds: float = 5.0, fps: float = 1.0, seed: int = 0) -> dict:
    assets, _ = synth_assets(seconds, model.cfg, seed=seed, fps=fps, seg_seconds=seg_seconds)
    with tempfile.TemporaryDirectory() as work:
        def run(mode):
            return run_video(assets, model, seg_seconds, mode, workdir=work)

        t_int, t_pre = time_pair(lambda: run("integrated"), lambda: run("pre"), iters, warmup)
        _, seg_int = run("integrated")
        _, seg_pre = run("pre")
    identical = all(np.array_equal(a.probs, b.probs) for a, b in zip(seg_int, seg_pre))
    return {
        "seconds": seconds, "segments": len(seg_int), "iters": iters,
        "integrated": asdict(t_int), "pre": asdict(t_pre),
        "speedup": speedup(t_pre, t_int), "identical_predictions": identical,
    }


def run_bench(train: Model, fused: Model, batch: int = 8, iters: int = 30, warmup: int = 5,
              pipeline_seconds: float = 60.0, pipeline_iters: int = 10, seed: int = 0) -> BenchReport:
    check_same_architecture(train, fused)
    report = BenchReport()
    report.vision = bench_vision(train.params, fused.params, train.cfg.vision, batch, iters, warmup, seed)
    if pipeline_iters > 0:
        report.pipeline = bench_pipeline(fused, pipeline_seconds, pipeline_iters, seed=seed)
    return report


def format_report(r: BenchReport) -> str:
    v = r.vision
    lines = [
        f"vision stack  batch={v['batch']} side={v['side']} iters={v['iters']}",
        f"  multi-branch  median {v['train']['median'] * 1e3:8.2f} ms   FLOPs {v['flops']['train']:,}"
        f"   params {v['params']['train']:,}",
        f"  fused         median {v['fused']['median'] * 1e3:8.2f} ms   FLOPs {v['flops']['fused']:,}"
        f"   params {v['params']['fused']:,}",
        f"  speedup {v['speedup']:.2%}   (full-scale reference: {REFERENCE_SPEEDUP_IEMOCAP:.2%} IEMOCAP, "
        f"{REFERENCE_SPEEDUP_MOSEI:.2%} CMU-MOSEI)",
    ]
    if r.pipeline:
        p = r.pipeline
        lines += [
            f"pipeline  {p['seconds']:.0f} s assets, {p['segments']} segments, iters={p['iters']}",
            f"  pre-mode      median {p['pre']['median'] * 1e3:8.2f} ms",
            f"  integrated    median {p['integrated']['median'] * 1e3:8.2f} ms",
            f"  speedup {p['speedup']:.2%}   identical predictions: {p['identical_predictions']}"
            f"   (full-scale reference: {REFERENCE_SPEEDUP_PIPELINE:.2%})",
        ]
    return "\n".join(lines)
