"""Train the toy multimodal model, report held-out scores, fuse and save both checkpoints.

    python scripts/train_toy.py --steps 200 --out runs/toy
"""
import argparse
import csv
import time
from pathlib import Path

from fv2es.cli import reparam_residual
from fv2es.model import ModelConfig
from fv2es.train import TrainConfig, evaluate_batch, heldout_batch, train_toy


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--batch", type=int, default=8)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/toy")
    args = ap.parse_args()

    cfg = ModelConfig.toy()
    t0 = time.perf_counter()
    res = train_toy(cfg, TrainConfig(steps=args.steps, batch=args.batch, lr=args.lr, seed=args.seed))
    elapsed = time.perf_counter() - t0
    fused = res.model.fused()
    report = evaluate_batch(fused, heldout_batch(cfg, 64))

    out = Path(args.out)
    res.model.save(out / "train")
    fused.save(out / "fused")
    with open(out / "loss_curve.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "bce"])
        w.writerows(enumerate(res.losses))

    print(f"trained {args.steps} steps in {elapsed:.1f} s")
    print(f"BCE {res.losses[0]:.4f} -> {res.losses[-1]:.4f}")
    print(f"reparam residual {reparam_residual(res.model, fused):.2e}")
    print(report.table())
    print(f"checkpoints -> {out}/train, {out}/fused")


if __name__ == "__main__":
    main()
