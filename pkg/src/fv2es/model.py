"""Full audio/vision/text model, its configuration and checkpoint directories."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as A
from . import fusion, fvt1, spectrum, text, vision
from .audio import AudioConfig
from .errors import CheckpointError, DataFormatError, DimensionMismatch, TensorFormatError, UserInputError
from .fusion import FusionConfig
from .spectrum import SpectrumTowerConfig
from .text import TextEncoderConfig, TokenSequence
from .vision import VisionNetConfig

CHECKPOINT_FORMAT = "fv2es-checkpoint"
MANIFEST = "manifest.json"
SPEC_NORM_EPS = 1e-3


@dataclass(frozen=True)
class ModelConfig:
    audio: AudioConfig = field(default_factory=AudioConfig)
    tower: SpectrumTowerConfig = field(default_factory=SpectrumTowerConfig)
    vision: VisionNetConfig = field(default_factory=VisionNetConfig)
    text: TextEncoderConfig = field(default_factory=TextEncoderConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    label_set: str = "iemocap"

    def __post_init__(self):
        if self.audio.side != self.tower.side:
            raise UserInputError(f"audio side {self.audio.side} != tower side {self.tower.side}")
        if self.label_set not in fusion.LABEL_SETS:
            raise UserInputError(f"unknown label set {self.label_set!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        try:
            vis = dict(d.get("vision", {}))
            if "layers" in vis:
                vis["layers"] = tuple(tuple(layer) for layer in vis["layers"])
            return cls(
                audio=AudioConfig(**d.get("audio", {})),
                tower=SpectrumTowerConfig(**d.get("tower", {})),
                vision=VisionNetConfig(**vis),
                text=TextEncoderConfig(**d.get("text", {})),
                fusion=FusionConfig(**d.get("fusion", {})),
                label_set=d.get("label_set", "iemocap"),
            )
        except TypeError as e:
            raise UserInputError(f"bad model config: {e}") from None

    @classmethod
    def toy(cls) -> "ModelConfig":
        """Desk-scale configuration used by the synthetic training task."""
        return cls(
            audio=AudioConfig(sample_rate=8000, n_fft=256, hop=64, n_mels=16, side=16),
            tower=SpectrumTowerConfig(side=16, d=16, heads=2, sub=2),
            vision=VisionNetConfig(layers=((3, 8, 2), (8, 8, 1), (8, 16, 2), (16, 16, 1), (16, 16, 2),
                                           (16, 16, 1)), side=16),
            text=TextEncoderConfig(vocab_size=256, d_t=16, layers=1, heads=2, max_len=32),
            fusion=FusionConfig(d_f=16, hidden=32, heads=2, max_len=64),
        )


def normalize_spectrum(s: np.ndarray) -> np.ndarray:
    """Standardize each spectrum to zero mean, unit variance (a constant
    spectrum, e.g. silence, maps to zeros)."""
    s = np.asarray(s, np.float32)
    mu = s.mean(axis=(-2, -1), keepdims=True)
    sd = s.std(axis=(-2, -1), keepdims=True)
    return ((s - mu) / (sd + np.float32(SPEC_NORM_EPS))).astype(np.float32)


@dataclass
class SegmentInputs:
    """Model-ready inputs for one time window; missing modalities are
    ``None`` spectrum, zero frames or no tokens."""
    spectrum: np.ndarray | None
    frames: np.ndarray
    tokens: list[int]


def init_params(cfg: ModelConfig, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    p = {}
    p.update(spectrum.init_params(cfg.tower, rng))
    p.update(vision.init_params(cfg.vision, rng))
    p.update(text.init_params(cfg.text, rng))
    p.update(fusion.init_params(cfg.fusion, cfg.vision.feature_dim, cfg.tower.d, cfg.text.d_t, rng))
    return p


class Model:
    def __init__(self, cfg: ModelConfig, params: dict):
        self.cfg = cfg
        self.params = params

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0) -> "Model":
        return cls(cfg, init_params(cfg, seed))

    @property
    def mode(self) -> str:
        return "fused" if vision.is_fused(self.params) else "train"

    def trainable_names(self) -> list[str]:
        buffers = vision.buffer_names(self.cfg.vision)
        return sorted(k for k in self.params if k not in buffers)

    def fused(self) -> "Model":
        if self.mode == "fused":
            raise CheckpointError("model is already fused")
        return Model(self.cfg, vision.fuse_params(self.params, self.cfg.vision))

    def param_count(self, prefix: str = "") -> int:
        return int(sum(v.size for k, v in self.params.items() if k.startswith(prefix)))

    # batched forward (training) ------------------------------------------

    def logits_batch(self, spectra, frames, ids, p=None, training: bool = False,
                     stats: dict | None = None) -> A.Var:
        """``B×side×side`` spectra, ``B×F×3×s×s`` frames, ``B×L`` token ids → ``B×6``."""
        p = self.params if p is None else p
        cfg = self.cfg
        b = len(spectra)
        feat, _ = spectrum.forward_tower(A.Var(normalize_spectrum(spectra)), cfg.tower, p)
        acoustic = A.reshape(feat, (b, 1, cfg.tower.d))
        frames = np.asarray(frames, np.float32)
        n_f = frames.shape[1]
        fv = vision.net_forward(frames.reshape((b * n_f,) + frames.shape[2:]), p, cfg.vision,
                                training=training, stats=stats)
        fv = A.mean(A.reshape(fv, fv.shape[:2] + (-1,)), axis=-1)
        visual = A.reshape(fv, (b, n_f, cfg.vision.feature_dim))
        ids = np.asarray(ids)
        if ids.shape[1] == 0:
            textual = A.reshape(A.as_var(p[text.PREFIX + "null"]) + np.zeros((b, 1, cfg.text.d_t), np.float32),
                                (b, 1, cfg.text.d_t))
        else:
            textual = text.encode_ids(ids, p, cfg.text)
        return fusion.fuse_logits(visual, acoustic, textual, p, cfg.fusion)

    # segment inference ----------------------------------------------------

    def modality_features(self, inputs: list[SegmentInputs], batched: bool = True):
        """Per-segment ``(visual, acoustic, textual)`` Vars, shapes ``n×width``.

        With ``batched`` the spectrum tower and the vision net each run once
        over every segment; per-item results are identical either way."""
        cfg, p = self.cfg, self.params
        side, vside = cfg.tower.side, cfg.vision.side
        for seg in inputs:
            if seg.spectrum is not None and seg.spectrum.shape != (side, side):
                raise DimensionMismatch(f"spectrum must be {side}×{side}, got {seg.spectrum.shape}")
            if len(seg.frames) and seg.frames.shape[1:] != (cfg.vision.in_channels, vside, vside):
                raise DimensionMismatch(f"frames must be n×3×{vside}×{vside}, got {seg.frames.shape}")
        with A.no_grad():
            if batched:
                specs = [s.spectrum for s in inputs if s.spectrum is not None]
                tower_out = iter(spectrum.forward_tower(A.Var(normalize_spectrum(np.stack(specs))),
                                                        cfg.tower, p)[0].data) if specs else iter(())
                acoustic = [next(tower_out) if s.spectrum is not None else None for s in inputs]
                counts = [len(s.frames) for s in inputs]
                if sum(counts):
                    allf = np.concatenate([s.frames for s in inputs if len(s.frames)]).astype(np.float32)
                    feats = vision.frame_features(allf, p, cfg.vision).data
                    visual = np.split(feats, np.cumsum(counts)[:-1])
                else:
                    visual = [np.zeros((0, cfg.vision.feature_dim), np.float32)] * len(inputs)
            else:
                acoustic = [spectrum.forward_tower(A.Var(normalize_spectrum(s.spectrum[None])), cfg.tower, p)[0].data[0]
                            if s.spectrum is not None else None for s in inputs]
                visual = [vision.frame_features(s.frames.astype(np.float32), p, cfg.vision).data
                          for s in inputs]
            out = []
            for seg, a, v in zip(inputs, acoustic, visual):
                a = (a if a is not None else np.asarray(p[fusion.PREFIX + "null_a"]))[None]
                v = v if len(v) else np.asarray(p[fusion.PREFIX + "null_v"])[None]
                t = text.encode_text(TokenSequence(list(seg.tokens)), p, cfg.text).data
                out.append((v, a, t))
        return out

    def predict_segments(self, inputs: list[SegmentInputs], batched: bool = True) -> list[fusion.EmotionScores]:
        scores = []
        for v, a, t in self.modality_features(inputs, batched):
            _, s = fusion.fuse_and_predict(fusion.ModalityFeatures(v, a, t), self.params,
                                           self.cfg.fusion, self.cfg.label_set)
            scores.append(s)
        return scores

    # checkpoints ------------------------------------------------------------

    def save(self, path, extra: dict | None = None) -> Path:
        out = Path(path)
        (out / "tensors").mkdir(parents=True, exist_ok=True)
        names = sorted(self.params)
        for name in names:
            fvt1.save(out / "tensors" / f"{name}.fvt1", np.asarray(self.params[name]))
        manifest = {
            "format": CHECKPOINT_FORMAT,
            "version": 1,
            "mode": self.mode,
            "config": self.cfg.to_dict(),
            "tensors": {name: f"tensors/{name}.fvt1" for name in names},
            "extra": extra or {},
        }
        (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return out

    @classmethod
    def load(cls, path) -> "Model":
        root = Path(path)
        mpath = root / MANIFEST
        if not mpath.is_file():
            raise CheckpointError(f"no checkpoint manifest at {mpath}")
        try:
            manifest = json.loads(mpath.read_text())
        except json.JSONDecodeError as e:
            raise DataFormatError(f"{mpath}: {e}") from None
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise DataFormatError(f"{mpath}: not an fv2es checkpoint")
        cfg = ModelConfig.from_dict(manifest["config"])
        params = {}
        for name, rel in manifest["tensors"].items():
            try:
                params[name] = fvt1.load(root / rel)
            except FileNotFoundError:
                raise DataFormatError(f"checkpoint tensor missing: {rel}") from None
        model = cls(cfg, params)
        if model.mode != manifest.get("mode"):
            raise TensorFormatError(f"manifest mode {manifest.get('mode')!r} disagrees with tensors")
        return model


def read_manifest(path) -> dict:
    return json.loads((Path(path) / MANIFEST).read_text())
