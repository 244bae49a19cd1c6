"""``fv2es`` command line.

Exit codes: 0 success, 2 bad user input, 3 malformed data, 4 internal error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import autodiff as A
from . import checks, pipeline, vision
from .bench import format_report, run_bench
from .errors import FV2ESError, LengthMismatch, UserInputError
from .fusion import LABEL_SETS
from .metrics import evaluate, read_label_file
from .model import Model, ModelConfig
from .synthetic import synth_assets
from .train import TrainConfig, train_toy

log = logging.getLogger("fv2es")


def _write_json(path, obj) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def load_config(spec: str | None, default: str = "toy") -> tuple[ModelConfig, dict]:
    """``toy``, ``default`` or a JSON file ``{"model": {...}, "train": {...}}``."""
    spec = spec or default
    if spec == "toy":
        return ModelConfig.toy(), {}
    if spec == "default":
        return ModelConfig(), {}
    path = Path(spec)
    if not path.is_file():
        raise UserInputError(f"config not found: {spec}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise UserInputError(f"{spec}: invalid JSON ({e})") from None
    if not isinstance(raw, dict):
        raise UserInputError(f"{spec}: config must be a JSON object")
    base = raw.get("base", "toy")
    if base not in ("toy", "default"):
        raise UserInputError(f"{spec}: base must be 'toy' or 'default'")
    cfg = ModelConfig.toy() if base == "toy" else ModelConfig()
    if "model" in raw:
        merged = cfg.to_dict()
        for k, v in raw["model"].items():
            if isinstance(v, dict) and isinstance(merged.get(k), dict):
                merged[k].update(v)
            else:
                merged[k] = v
        cfg = ModelConfig.from_dict(merged)
    train = raw.get("train", {})
    known = {f.name for f in fields(TrainConfig)}
    if not isinstance(train, dict) or set(train) - known:
        raise UserInputError(f"{spec}: unknown train keys {sorted(set(train) - known)}")
    return cfg, train


# commands ------------------------------------------------------------------

def cmd_preprocess(args) -> int:
    cfg, _ = load_config(args.config, "default")
    assets = pipeline.load_assets(args.audio, args.frames, args.transcript, cfg.audio.sample_rate)
    segs = pipeline.segment_timeline(assets, args.segment_seconds, cfg.text.vocab_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = pipeline.segment_manifest(segs)
    manifest["segment_seconds"] = args.segment_seconds
    if args.materialize:
        model = Model(cfg, {})
        for s, rec in zip(segs, manifest["segments"]):
            rec["dir"] = pipeline.materialize_segment(s, model, out).name
    _write_json(out / "segments.json", manifest)
    print(f"{len(segs)} segments -> {out / 'segments.json'}")
    return 0


def cmd_train_toy(args) -> int:
    cfg, overrides = load_config(args.config, "toy")
    kw = dict(overrides)
    for name in ("steps", "batch", "lr", "seed"):
        if getattr(args, name) is not None:
            kw[name] = getattr(args, name)
    tc = TrainConfig(**kw)
    if tc.steps < 0 or tc.batch < 1 or tc.lr <= 0:
        raise UserInputError("steps must be >= 0, batch >= 1 and lr > 0")
    res = train_toy(cfg, tc)
    out = Path(args.out)
    res.model.save(out, extra={"train": asdict(tc)})
    with open(out / "loss_curve.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "bce"])
        for i, loss in enumerate(res.losses):
            w.writerow([i, repr(loss)])
    if res.losses:
        print(f"steps {tc.steps}  initial BCE {res.losses[0]:.4f}  final BCE {res.losses[-1]:.4f}")
    print(f"checkpoint -> {out}")
    return 0


def reparam_residual(train: Model, fused: Model, probes: int = 10, seed: int = 0) -> float:
    vc = train.cfg.vision
    rng = np.random.default_rng(seed)
    worst = 0.0
    with A.no_grad():
        for _ in range(probes):
            x = rng.random((1, vc.in_channels, vc.side, vc.side)).astype(np.float32)
            a = vision.net_forward(x, train.params, vc).data
            b = vision.net_forward(x, fused.params, vc).data
            worst = max(worst, float(np.max(np.abs(a - b))))
    return worst


def cmd_reparam(args) -> int:
    train = Model.load(args.model)
    fused = train.fused()
    res = reparam_residual(train, fused, 10, args.seed)
    fused.save(args.out, extra={"source": "reparam"})
    vc = train.cfg.vision
    print(f"max |train - fused| over 10 probes: {res:.3e}")
    print(f"vision params: train {vision.count_params(vc, 'train')['total']:,}  "
          f"fused {vision.count_params(vc, 'fused')['total']:,}")
    print(f"total params:  train {train.param_count():,}  fused {fused.param_count():,}")
    print(f"fused checkpoint -> {args.out}")
    return 0


def cmd_infer(args) -> int:
    model = Model.load(args.model)
    assets = pipeline.load_asset_dir(args.input, model.cfg.audio.sample_rate)
    video, per_seg = pipeline.run_video(assets, model, args.segment_seconds, args.mode)
    recs = pipeline.predictions_json(video, per_seg, args.threshold)
    _write_json(args.out, recs)
    print(" ".join(f"{c}={p:.3f}" for c, p in zip(video.labels, video.probs)))
    return 0


def cmd_bench(args) -> int:
    train, fused = Model.load(args.train_model), Model.load(args.fused_model)
    report = run_bench(train, fused, args.batch, args.iters, args.warmup,
                       args.pipeline_seconds, args.pipeline_iters, args.seed)
    print(format_report(report))
    if args.out:
        _write_json(args.out, report.to_dict())
    return 0


def cmd_eval(args) -> int:
    preds = read_label_file(args.preds)
    truth = read_label_file(args.labels)
    if sorted(preds) != sorted(truth):
        raise LengthMismatch(f"{len(preds)} predicted segments vs {len(truth)} labelled")
    keys = sorted(truth)
    label_set = args.label_set
    report = evaluate([preds[k] for k in keys], [truth[k] for k in keys], list(LABEL_SETS[label_set]))
    print(report.table())
    if args.out:
        _write_json(args.out, report.to_dict())
    return 0


def cmd_gradcheck(args) -> int:
    results = checks.run_suite(inject_bug=args.inject_bug, seed=args.seed, include_model=not args.ops_only)
    print(checks.format_results(results))
    return 0 if all(r.passed for r in results) else 1


def cmd_synth(args) -> int:
    cfg, _ = load_config(args.config, "toy")
    assets, labels = synth_assets(args.seconds, cfg, seed=args.seed, fps=args.fps,
                                  seg_seconds=args.segment_seconds)
    out = pipeline.save_assets(assets, args.out)
    _write_json(out / "labels.json", [{"segment_index": i, "labels": [int(v) for v in row]}
                                      for i, row in enumerate(labels)])
    print(f"{args.seconds:g} s synthetic assets -> {out}")
    return 0


# parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fv2es", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--seed", type=int, default=0)
        p.set_defaults(func=fn)
        return p

    p = add("preprocess", cmd_preprocess, "segment assets and write a manifest")
    p.add_argument("--audio")
    p.add_argument("--frames")
    p.add_argument("--transcript")
    p.add_argument("--segment-seconds", type=float, default=5.0)
    p.add_argument("--config", help="toy | default | path to JSON (default: default)")
    p.add_argument("--materialize", action="store_true", help="also store per-segment pre-mode inputs")
    p.add_argument("--out", required=True)

    p = add("train-toy", cmd_train_toy, "train on the synthetic multimodal task")
    p.add_argument("--config", help="toy | default | path to JSON (default: toy)")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--out", required=True)

    p = add("reparam", cmd_reparam, "fuse a train-mode checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)

    p = add("infer", cmd_infer, "predict emotions for an asset directory")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("integrated", "pre"), default="integrated")
    p.add_argument("--segment-seconds", type=float, default=5.0)
    p.add_argument("--threshold", type=float, default=0.5)

    p = add("bench", cmd_bench, "time multi-branch vs fused and integrated vs pre-mode")
    p.add_argument("--train-model", required=True)
    p.add_argument("--fused-model", required=True)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--iters", type=int, default=30)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--pipeline-seconds", type=float, default=60.0)
    p.add_argument("--pipeline-iters", type=int, default=10)
    p.add_argument("--out")

    p = add("eval", cmd_eval, "score predictions against labels")
    p.add_argument("--preds", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--label-set", choices=sorted(LABEL_SETS), default="iemocap")
    p.add_argument("--out")

    p = add("gradcheck", cmd_gradcheck, "finite-difference gradient suite")
    p.add_argument("--inject-bug", action="store_true", help="use a broken GELU backward")
    p.add_argument("--ops-only", action="store_true")

    p = add("synth", cmd_synth, "write synthetic assets and labels")
    p.add_argument("--config", help="toy | default | path to JSON (default: toy)")
    p.add_argument("--seconds", type=float, default=60.0)
    p.add_argument("--fps", type=float, default=1.0)
    p.add_argument("--segment-seconds", type=float, default=5.0)
    p.add_argument("--out", required=True)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FV2ESError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except (FileNotFoundError, IsADirectoryError, PermissionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
