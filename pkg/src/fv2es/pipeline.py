"""Video-level inference: timeline segmentation, aligned modalities, aggregation.

Integrated mode keeps every aligned segment in memory and batches the
spectrum tower and vision net over all segments. Pre-mode reproduces the
store-and-reload workflow: each segment's mel spectrum, frames and tokens
are written to disk, read back, and inferred one segment at a time. Both produce identical probabilities.
"""
from __future__ import annotations

import json
import math
import os
import re
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import audio as AU
from . import fvt1
from . import text as TX
from .errors import DataFormatError, EmptyAssets, EmptyList, UserInputError
from .fusion import EmotionScores, predict_labels
from .model import Model, SegmentInputs

FRAME_RE = re.compile(r"^frame_(\d+)\.(png|ppm)$", re.IGNORECASE)
_EPS = 1e-9


@dataclass
class Frame:
    t: float
    image: np.ndarray  # H×W×3 uint8


@dataclass
class VideoAssets:
    audio: AU.Waveform | None = None
    frames: list[Frame] = field(default_factory=list)
    transcript: list[TX.Utterance] = field(default_factory=list)

    def __post_init__(self):
        ts = [f.t for f in self.frames]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise UserInputError("frame timestamps must be non-decreasing")

    @property
    def duration(self) -> float:
        ends = []
        if self.audio is not None and len(self.audio.samples):
            ends.append(self.audio.duration)
        if self.frames:
            ends.append(self.frames[-1].t + _EPS)
        if self.transcript:
            ends.append(max(u.end_s for u in self.transcript))
        return max(ends, default=0.0)


@dataclass
class Segment:
    index: int
    t0: float
    t1: float
    frames: list[Frame]
    audio: AU.Waveform | None
    tokens: list[int]


def segment_bounds(duration: float, seg_seconds: float) -> list[tuple[float, float]]:
    """Windows ``[kL, (k+1)L)``; a remainder shorter than L/2 extends the last window."""
    if seg_seconds <= 0:
        raise UserInputError("segment length must be positive")
    if duration <= 0:
        raise EmptyAssets("assets have zero duration")
    n_full = int(math.floor(duration / seg_seconds + _EPS))
    rem = duration - n_full * seg_seconds
    bounds = [(k * seg_seconds, (k + 1) * seg_seconds) for k in range(n_full)]
    if rem > _EPS:
        if rem >= seg_seconds / 2 - _EPS or not bounds:
            bounds.append((n_full * seg_seconds, duration))
        else:
            bounds[-1] = (bounds[-1][0], duration)
    return bounds


def segment_timeline(assets: VideoAssets, seg_seconds: float = 5.0,
                     vocab_size: int = TX.TextEncoderConfig.vocab_size) -> list[Segment]:
    if assets.audio is None and not assets.frames and not assets.transcript:
        raise EmptyAssets("no audio, frames or transcript")
    bounds = segment_bounds(assets.duration, seg_seconds)
    last = len(bounds) - 1

    def slot(t: float) -> int:
        for i, (t0, t1) in enumerate(bounds):
            if t0 - _EPS <= t < t1 - _EPS:
                return i
        return last if t >= bounds[last][0] else 0

    frames = [[] for _ in bounds]
    for f in assets.frames:
        frames[slot(f.t)].append(f)
    tokens = [[] for _ in bounds]
    for u in assets.transcript:
        seq = TX.tokenize_utterance(u, vocab_size)
        for tok, (s0, _) in zip(seq.tokens, seq.spans):
            tokens[slot(s0)].append(tok)
    segs = []
    for i, (t0, t1) in enumerate(bounds):
        wav = None
        if assets.audio is not None:
            sr = assets.audio.sample_rate
            a = int(round(t0 * sr))
            b = len(assets.audio.samples) if i == last else int(round(t1 * sr))
            wav = AU.Waveform(assets.audio.samples[a:b], sr)
        segs.append(Segment(i, t0, t1, frames[i], wav, tokens[i]))
    return segs


def image_to_chw(img: np.ndarray, side: int) -> np.ndarray:
    """H×W×3 uint8 → 3×side×side float32 in [0, 1] (bilinear resize if needed)."""
    if img.shape[:2] != (side, side):
        img = np.asarray(Image.fromarray(img).resize((side, side), Image.BILINEAR))
    return (np.transpose(img, (2, 0, 1)).astype(np.float32) / np.float32(255.0))


def segment_inputs(seg: Segment, model: Model) -> SegmentInputs:
    cfg = model.cfg
    spec = None
    if seg.audio is not None and len(seg.audio.samples) >= cfg.audio.n_fft:
        spec = AU.spectrum_for(seg.audio, cfg.audio)
    side = cfg.vision.side
    frames = (np.stack([image_to_chw(f.image, side) for f in seg.frames]) if seg.frames
              else np.zeros((0, 3, side, side), np.float32))
    return SegmentInputs(spec, frames, list(seg.tokens))


def run_segment(seg: Segment, model: Model) -> EmotionScores:
    return model.predict_segments([segment_inputs(seg, model)], batched=False)[0]


def aggregate_video(scores: list[EmotionScores]) -> EmotionScores:
    if not scores:
        raise EmptyList("no segment scores to aggregate")
    return EmotionScores(np.mean([s.probs for s in scores], axis=0), scores[0].label_set)


# pre-mode materialisation ------------------------------------------------

def materialize_segment(seg: Segment, model: Model, root: Path) -> Path:
    """Preprocess one segment and store it: the square mel spectrum as FVT1,
    frames as PNG, tokens and timing as JSON."""
    d = root / f"segment_{seg.index:04d}"
    (d / "frames").mkdir(parents=True, exist_ok=True)
    inputs = segment_inputs(seg, model)
    if inputs.spectrum is not None:
        fvt1.save(d / "spectrum.fvt1", inputs.spectrum)
    for f in seg.frames:
        Image.fromarray(f.image).save(d / "frames" / f"frame_{int(round(f.t * 1000))}.png")
    meta = {"index": seg.index, "t0": seg.t0, "t1": seg.t1, "tokens": inputs.tokens}
    (d / "segment.json").write_text(json.dumps(meta))
    return d


def load_materialized(d: Path, model: Model) -> SegmentInputs:
    meta = json.loads((d / "segment.json").read_text())
    spec = fvt1.load(d / "spectrum.fvt1") if (d / "spectrum.fvt1").exists() else None
    side = model.cfg.vision.side
    frames = read_frames(d / "frames")
    chw = (np.stack([image_to_chw(f.image, side) for f in frames]) if frames
           else np.zeros((0, 3, side, side), np.float32))
    return SegmentInputs(spec, chw, list(meta["tokens"]))


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("FV2ES_THREADS", "1")))
    except ValueError:
        return 1


def run_video(assets: VideoAssets, model: Model, seg_seconds: float = 5.0, mode: str = "integrated",
              workdir: str | os.PathLike | None = None) -> tuple[EmotionScores, list[EmotionScores]]:
    segs = segment_timeline(assets, seg_seconds, model.cfg.text.vocab_size)
    if mode == "integrated":
        per_seg = model.predict_segments([segment_inputs(s, model) for s in segs], batched=True)
    elif mode == "pre":
        with tempfile.TemporaryDirectory(dir=workdir) as tmp:
            dirs = [materialize_segment(s, model, Path(tmp)) for s in segs]

            def infer(d):
                return model.predict_segments([load_materialized(d, model)], batched=False)[0]
            with ThreadPoolExecutor(_threads()) as pool:
                per_seg = list(pool.map(infer, dirs))
    else:
        raise UserInputError(f"mode must be integrated|pre, got {mode!r}")
    return aggregate_video(per_seg), per_seg


def predictions_json(video: EmotionScores, per_seg: list[EmotionScores], threshold: float = 0.5) -> list:
    recs = [{"segment_index": i, "probs": [float(v) for v in s.probs],
             "labels": [int(v) for v in predict_labels(s, threshold)]} for i, s in enumerate(per_seg)]
    recs.append({"video": True, "label_set": video.label_set, "classes": list(video.labels),
                 "probs": [float(v) for v in video.probs],
                 "labels": [int(v) for v in predict_labels(video, threshold)]})
    return recs


# asset I/O ----------------------------------------------------------------

def read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as e:
        raise DataFormatError(f"{path}: unreadable image ({e})") from None


def read_frames(frames_dir) -> list[Frame]:
    frames = []
    for p in Path(frames_dir).iterdir():
        m = FRAME_RE.match(p.name)
        if m:
            frames.append(Frame(int(m.group(1)) / 1000.0, read_image(p)))
    frames.sort(key=lambda f: f.t)
    return frames


def load_assets(audio_path=None, frames_dir=None, transcript_path=None,
                sample_rate: int | None = None) -> VideoAssets:
    for p in (audio_path, frames_dir, transcript_path):
        if p is not None and not Path(p).exists():
            raise UserInputError(f"input not found: {p}")
    wav = AU.read_wav(audio_path, sample_rate) if audio_path else None
    if wav is not None and sample_rate and wav.sample_rate != sample_rate:
        raise UserInputError(f"audio is {wav.sample_rate} Hz, model expects {sample_rate} Hz")
    frames = read_frames(frames_dir) if frames_dir else []
    transcript = TX.read_transcript(transcript_path) if transcript_path else []
    return VideoAssets(wav, frames, transcript)


def load_asset_dir(path, sample_rate: int | None = None) -> VideoAssets:
    """Directory layout: ``audio.wav``, ``frames/frame_<ms>.png|ppm``,
    ``transcript.jsonl``; each part optional."""
    root = Path(path)
    if not root.is_dir():
        raise UserInputError(f"asset directory not found: {root}")
    pick = lambda name: root / name if (root / name).exists() else None  # noqa: E731
    return load_assets(pick("audio.wav"), pick("frames"), pick("transcript.jsonl"), sample_rate)


def save_assets(assets: VideoAssets, path, fmt: str = "png") -> Path:
    root = Path(path)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    if assets.audio is not None:
        AU.write_wav(root / "audio.wav", assets.audio)
    for f in assets.frames:
        Image.fromarray(f.image).save(root / "frames" / f"frame_{int(round(f.t * 1000))}.{fmt}")
    if assets.transcript:
        TX.write_transcript(root / "transcript.jsonl", assets.transcript)
    return root


def segment_manifest(segs: list[Segment]) -> dict:
    return {"segments": [{
        "index": s.index, "t0": s.t0, "t1": s.t1,
        "frame_times": [f.t for f in s.frames],
        "audio_samples": 0 if s.audio is None else int(len(s.audio.samples)),
        "tokens": s.tokens,
    } for s in segs]}
