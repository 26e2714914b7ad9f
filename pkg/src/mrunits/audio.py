"""Waveform container, WAV I/O and the shared log-mel analysis."""
from __future__ import annotations

import functools
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import engine as E

LOG_FLOOR = 1e-5


@dataclass
class WaveBuffer:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.samples.ndim != 1:
            raise ValueError(f"expected mono samples, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    @property
    def duration_ms(self):
        return 1000.0 * len(self.samples) / self.sample_rate

    def normalized(self):
        peak = float(np.max(np.abs(self.samples))) if len(self.samples) else 0.0
        if peak <= 1.0:
            return self
        return WaveBuffer(self.samples / peak, self.sample_rate)


def resample_linear(samples, src_rate, dst_rate):
    if src_rate == dst_rate:
        return np.asarray(samples, dtype=np.float64)
    n_out = int(round(len(samples) * dst_rate / src_rate))
    t_out = np.arange(n_out) * (src_rate / dst_rate)
    return np.interp(t_out, np.arange(len(samples)), samples)


def read_wav(path, target_rate=None):
    """Read 16-bit PCM mono; resample linearly if ``target_rate`` differs."""
    with wave.open(str(path), "rb") as fh:
        if fh.getsampwidth() != 2:
            raise ValueError(f"{path}: only 16-bit PCM is supported")
        n_ch = fh.getnchannels()
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if n_ch > 1:
        data = data.reshape(-1, n_ch).mean(axis=1)
    if target_rate is not None and target_rate != rate:
        data = resample_linear(data, rate, target_rate)
        rate = target_rate
    return WaveBuffer(data, rate)


def write_wav(path, buf: WaveBuffer):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pcm = np.clip(np.round(np.asarray(buf.samples) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(buf.sample_rate))
        fh.writeframes(pcm.tobytes())


# analysis ------------------------------------------------------------------

@dataclass(frozen=True)
class MelAnalysis:
    sample_rate: int = 16000
    frame_ms: float = 20.0
    n_fft: int = 1024
    n_mels: int = 80

    @property
    def hop(self):
        return int(round(self.sample_rate * self.frame_ms / 1000.0))

    def n_frames(self, n_samples):
        return n_samples // self.hop


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


@functools.lru_cache(maxsize=16)
def mel_filterbank(sample_rate, n_fft, n_mels, dtype="float32"):
    """Triangular HTK-mel filters, shape ``(n_mels, n_fft // 2 + 1)``."""
    n_bins = n_fft // 2 + 1
    freqs = np.linspace(0.0, sample_rate / 2.0, n_bins)
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    fb = np.zeros((n_mels, n_bins))
    for i in range(n_mels):
        lo, mid, hi = edges[i], edges[i + 1], edges[i + 2]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        fb[i] = np.maximum(0.0, np.minimum(up, down))
        # filters narrower than one bin still get the nearest bin
        if fb[i].sum() == 0.0:
            fb[i, int(np.argmin(np.abs(freqs - mid)))] = 1.0
    fb.setflags(write=False)
    return fb.astype(dtype)


@functools.lru_cache(maxsize=16)
def _dft_basis(n_fft, dtype):
    n = np.arange(n_fft)[:, None]
    kk = np.arange(n_fft // 2 + 1)[None, :]
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n_fft) / n_fft)
    ang = 2.0 * np.pi * n * kk / n_fft
    cos = (window[:, None] * np.cos(ang)).astype(dtype)
    sin = (-window[:, None] * np.sin(ang)).astype(dtype)
    return cos, sin


def frame_indices(n_samples, n_fft, hop):
    """Reflect-padded sample indices, ``(n_samples // hop, n_fft)``.

    Frame ``t`` is centred on sample ``t * hop + hop // 2``.
    """
    if n_samples < 2:
        raise ValueError("need at least two samples to frame a signal")
    n_frames = n_samples // hop
    starts = np.arange(n_frames) * hop + hop // 2 - n_fft // 2
    idx = starts[:, None] + np.arange(n_fft)[None, :]
    period = 2 * (n_samples - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n_samples, period - idx, idx)


def log_mel_tensor(x, analysis: MelAnalysis):
    """Differentiable log-mel magnitude spectrogram ``(n_mels, frames)``.

    ``x`` is a 1-D tensor of samples (or a ``(1, N)`` tensor).
    """
    x = E.as_tensor(x)
    if x.ndim == 2:
        x = E.reshape(x, (x.shape[1],))
    dtype = x.dtype.name
    idx = frame_indices(x.shape[0], analysis.n_fft, analysis.hop)
    if idx.shape[0] == 0:
        raise ValueError("signal shorter than one analysis hop")
    frames = E.take(x, idx, axis=0)
    cos, sin = _dft_basis(analysis.n_fft, dtype)
    re = E.matmul(frames, cos)
    im = E.matmul(frames, sin)
    mag = E.sqrt(re * re + im * im + 1e-12)
    fb = mel_filterbank(analysis.sample_rate, analysis.n_fft, analysis.n_mels, dtype)
    mel = E.matmul(fb, E.transpose(mag))
    return E.log(E.clamp_min(mel, LOG_FLOOR))


def log_mel(samples, analysis: MelAnalysis):
    """Numpy log-mel spectrogram ``(n_mels, frames)`` in float64."""
    x = E.Tensor(np.asarray(samples, dtype=np.float64))
    return log_mel_tensor(x, analysis).data
