"""Waveform to square log-mel spectrum."""
from __future__ import annotations

import wave
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import BadSide, TooShort, UnsupportedCodec, UserInputError

LOG_FLOOR = 1e-10


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise UserInputError("sample_rate must be positive")
        self.samples = np.asarray(self.samples, dtype=np.float32)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class AudioConfig:
    sample_rate: int = 16000
    n_fft: int = 1024
    hop: int = 256
    n_mels: int = 64
    side: int = 64


@dataclass
class MelSpectrum:
    values: np.ndarray  # n_mels × frames
    n_fft: int
    hop: int
    n_mels: int
    sample_rate: int


def frame_count(n_samples: int, n_fft: int, hop: int) -> int:
    return (n_samples - n_fft) // hop + 1


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft_power(w: Waveform, n_fft: int, hop: int) -> np.ndarray:
    """Hann-windowed power spectra, ``(n_fft/2+1) × frames``, no centering."""
    if n_fft <= 0 or n_fft & (n_fft - 1):
        raise UserInputError(f"n_fft must be a power of two, got {n_fft}")
    x = np.asarray(w.samples, dtype=np.float64)
    if len(x) < n_fft:
        raise TooShort(f"{len(x)} samples < n_fft={n_fft}")
    n_frames = frame_count(len(x), n_fft, hop)
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    spec = np.fft.rfft(x[idx] * hann(n_fft), axis=1)
    return (spec.real ** 2 + spec.imag ** 2).T


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_points(n_mels: int, sr: int) -> np.ndarray:
    """The ``n_mels + 2`` band edges in Hz, equally spaced in mel from 0 to sr/2."""
    return mel_to_hz(np.linspace(0.0, hz_to_mel(sr / 2.0), n_mels + 2))


def mel_centers(n_mels: int, sr: int) -> np.ndarray:
    return mel_points(n_mels, sr)[1:-1]


def mel_filterbank(n_mels: int, n_fft: int, sr: int) -> np.ndarray:
    if n_mels < 2:
        raise UserInputError("n_mels must be >= 2")
    edges = mel_points(n_mels, sr)
    freqs = np.arange(n_fft // 2 + 1) * sr / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def mel_spectrogram(w: Waveform, cfg: AudioConfig = AudioConfig()) -> MelSpectrum:
    power = stft_power(w, cfg.n_fft, cfg.hop)
    fb = mel_filterbank(cfg.n_mels, cfg.n_fft, cfg.sample_rate)
    energies = T.matmul(fb, power)
    values = np.log(np.maximum(energies, LOG_FLOOR)).astype(np.float32)
    return MelSpectrum(values, cfg.n_fft, cfg.hop, cfg.n_mels, cfg.sample_rate)


def _resize_axis(x: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    n_in = x.shape[axis]
    if n_in == n_out:
        return x
    pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1)) if n_out > 1 else np.zeros(1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = (pos - lo).astype(x.dtype)
    shape = [1] * x.ndim
    shape[axis] = n_out
    frac = frac.reshape(shape)
    return np.take(x, lo, axis=axis) * (1 - frac) + np.take(x, hi, axis=axis) * frac


def reshape_square(m, side: int) -> np.ndarray:
    """Bilinear (corner-aligned) resize of a mel map to ``side × side``."""
    if side <= 0 or side % 4:
        raise BadSide(f"side must be a positive multiple of 4, got {side}")
    values = m.values if isinstance(m, MelSpectrum) else np.asarray(m)
    return _resize_axis(_resize_axis(values, side, 0), side, 1)


def spectrum_for(w: Waveform, cfg: AudioConfig = AudioConfig()) -> np.ndarray:
    return reshape_square(mel_spectrogram(w, cfg), cfg.side)


# WAV I/O -----------------------------------------------------------------

def read_wav(path, target_sr: int | None = None) -> Waveform:
    """Read 16-bit PCM WAV, downmix to mono, optionally decimate by an
    integer factor to ``target_sr``."""
    try:
        with wave.open(str(path), "rb") as f:
            if f.getsampwidth() != 2:
                raise UnsupportedCodec(f"{path}: only 16-bit PCM supported, "
                                       f"got {8 * f.getsampwidth()}-bit")
            channels, sr = f.getnchannels(), f.getframerate()
            raw = f.readframes(f.getnframes())
    except (wave.Error, EOFError) as e:
        raise UnsupportedCodec(f"{path}: {e}") from None
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float32) / np.float32(32768.0)
    if channels > 1:
        pcm = pcm[: len(pcm) // channels * channels].reshape(-1, channels).mean(axis=1)
    w = Waveform(pcm, sr)
    return decimate(w, target_sr) if target_sr and target_sr != sr else w


def decimate(w: Waveform, target_sr: int) -> Waveform:
    if w.sample_rate % target_sr:
        raise UserInputError(f"cannot decimate {w.sample_rate} Hz to {target_sr} Hz "
                             "by an integer factor")
    k = w.sample_rate // target_sr
    n = len(w.samples) // k * k
    return Waveform(w.samples[:n].reshape(-1, k).mean(axis=1), target_sr)


def quantize_pcm16(samples: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(samples, np.float64) * 32768.0), -32768, 32767).astype("<i2")


def write_wav(path, w: Waveform) -> None:
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate)
        f.writeframes(quantize_pcm16(w.samples).tobytes())
