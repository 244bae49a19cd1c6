"""Run the spectrum tower on a synthetic utterance and dump its 21 attention maps.

    python scripts/export_attention.py --out runs/attention
"""
import argparse

import numpy as np

from fv2es import audio as AU
from fv2es import spectrum as S
from fv2es.model import ModelConfig, normalize_spectrum


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seconds", type=float, default=2.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/attention")
    args = ap.parse_args()

    cfg = ModelConfig()
    sr = cfg.audio.sample_rate
    t = np.arange(int(args.seconds * sr)) / sr
    rng = np.random.default_rng(args.seed)
    wave = 0.4 * np.sin(2 * np.pi * 220 * t * (1 + 0.3 * t)) + 0.05 * rng.standard_normal(t.size)
    spec = normalize_spectrum(AU.spectrum_for(AU.Waveform(wave.astype(np.float32), sr), cfg.audio))
    _, maps = S.forward_tower(spec, cfg.tower, S.init_params(cfg.tower, rng))
    paths = S.export_attention(maps, args.out)
    print(f"blocks per layer {maps.counts()}; {len(paths)} files -> {args.out}")


if __name__ == "__main__":
    main()
