"""Seeded synthetic multimodal data with known labels.

Six independent binary labels, two per modality:

* 0, 1: a low / high tone is present in the audio
* 2: frames are bright rather than dark
* 3: frames lean red rather than blue
* 4, 5: the keyword "joy" / "gloom" occurs in the transcript
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import audio as AU
from .model import ModelConfig
from .pipeline import Frame, VideoAssets
from .text import Utterance, fnv1a64

LOW_HZ, HIGH_HZ = 500.0, 2500.0
KEYWORDS = ("joy", "gloom")
_FILLER = ("the", "a", "we", "talk", "about", "it", "then", "later", "maybe", "here", "there",
           "today", "walk", "seen", "said", "home", "time", "very", "just", "okay", "well", "so")


def filler_words(vocab_size: int) -> list[str]:
    """Fillers whose hashed ids never collide with a keyword id."""
    kw = {fnv1a64(k.encode()) % vocab_size for k in KEYWORDS}
    return [w for w in _FILLER if fnv1a64(w.encode()) % vocab_size not in kw]


def synth_audio(rng, labels, n_samples: int, sr: int) -> np.ndarray:
    t = np.arange(n_samples) / sr
    x = 0.01 * rng.standard_normal(n_samples)
    for bit, hz in zip(labels[:2], (LOW_HZ, HIGH_HZ)):
        if bit:
            x += rng.uniform(0.2, 0.4) * np.cos(2 * np.pi * hz * rng.uniform(0.97, 1.03) * t
                                                 + rng.uniform(0, 2 * np.pi))
    # snap to the 16-bit PCM grid so WAV round trips are exact
    return AU.quantize_pcm16(x).astype(np.float32) / np.float32(32768.0)


def synth_image(rng, labels, side: int) -> np.ndarray:
    base = 0.7 if labels[2] else 0.3
    img = base + rng.uniform(-0.1, 0.1, (side, side, 3))
    tilt = 0.15 if labels[3] else -0.15
    img[..., 0] += tilt
    img[..., 2] -= tilt
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def synth_text(rng, labels, n_words: int, vocab_size: int) -> str:
    fill = filler_words(vocab_size)
    words = [fill[i] for i in rng.integers(0, len(fill), n_words)]
    slots = rng.permutation(n_words)
    for bit, kw, slot in zip(labels[4:6], KEYWORDS, slots):
        if bit:
            words[slot] = kw
    return " ".join(words)


@dataclass
class Batch:
    spectra: np.ndarray   # B×side×side
    frames: np.ndarray    # B×F×3×s×s
    ids: np.ndarray       # B×L
    labels: np.ndarray    # B×6


def sample_batch(rng: np.random.Generator, cfg: ModelConfig, batch: int, n_frames: int = 2,
                 n_words: int = 5, seconds: float = 1.0) -> Batch:
    from .text import tokenize
    sr, side = cfg.audio.sample_rate, cfg.vision.side
    labels = rng.integers(0, 2, (batch, 6))
    specs, frames, ids = [], [], []
    for lab in labels:
        wav = AU.Waveform(synth_audio(rng, lab, int(seconds * sr), sr), sr)
        specs.append(AU.spectrum_for(wav, cfg.audio))
        frames.append(np.stack([np.transpose(synth_image(rng, lab, side), (2, 0, 1))
                                for _ in range(n_frames)]).astype(np.float32) / np.float32(255.0))
        ids.append(tokenize(synth_text(rng, lab, n_words, cfg.text.vocab_size), cfg.text.vocab_size).tokens)
    return Batch(np.stack(specs), np.stack(frames), np.asarray(ids, np.int64), labels)


def synth_assets(seconds: float, cfg: ModelConfig, seed: int = 0, fps: float = 1.0,
                 seg_seconds: float = 5.0, image_side: int | None = None) -> tuple[VideoAssets, np.ndarray]:
    """A video whose labels change every ``seg_seconds``; returns the assets and
    the per-window label matrix."""
    rng = np.random.default_rng(seed)
    sr = cfg.audio.sample_rate
    side = image_side or cfg.vision.side
    n_win = max(1, int(np.ceil(seconds / seg_seconds - 1e-9)))
    labels = rng.integers(0, 2, (n_win, 6))
    total = int(round(seconds * sr))
    audio = np.zeros(total, np.float32)
    frames, transcript = [], []
    for w in range(n_win):
        t0, t1 = w * seg_seconds, min((w + 1) * seg_seconds, seconds)
        a, b = int(round(t0 * sr)), int(round(t1 * sr))
        audio[a:b] = synth_audio(rng, labels[w], b - a, sr)
        t = t0
        while t < t1 - 1e-9:
            frames.append(Frame(round(t, 3), synth_image(rng, labels[w], side)))
            t += 1.0 / fps
        transcript.append(Utterance(t0 + 0.1, t1 - 0.1,
                                    synth_text(rng, labels[w], 5, cfg.text.vocab_size)))
    return VideoAssets(AU.Waveform(audio, sr), frames, transcript), labels
