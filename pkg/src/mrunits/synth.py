"""Seeded vocal-like test clips: harmonic stacks with vibrato and formants."""
from __future__ import annotations

import numpy as np

from .audio import WaveBuffer

_FORMANTS = [  # (centre Hz, bandwidth Hz) sets for a few vowels
    ((700, 110), (1220, 120), (2600, 160)),
    ((300, 60), (2300, 100), (3000, 150)),
    ((500, 80), (900, 90), (2400, 150)),
    ((400, 70), (1900, 110), (2550, 150)),
]


def _envelope(freqs, formants):
    amp = np.zeros_like(freqs)
    for centre, bw in formants:
        amp += 1.0 / (1.0 + ((freqs - centre) / bw) ** 2)
    return amp


def synth_clip(rng, duration_s=2.0, sample_rate=8000, f0_range=(140.0, 420.0), noise=0.002):
    """One clip of sung notes: each note holds a pitch with 5-6 Hz vibrato."""
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate
    n_notes = int(rng.integers(2, 5))
    bounds = np.sort(rng.uniform(0.15, 0.85, size=n_notes - 1)) * n
    edges = np.concatenate([[0], bounds.astype(int), [n]])
    f0 = np.empty(n)
    vowel = np.empty(n, dtype=int)
    for i in range(n_notes):
        lo, hi = edges[i], edges[i + 1]
        f0[lo:hi] = rng.uniform(*f0_range)
        vowel[lo:hi] = rng.integers(len(_FORMANTS))
    # glide between notes over ~30 ms
    k = max(1, int(0.03 * sample_rate))
    f0 = np.convolve(np.pad(f0, (k, k), mode="edge"), np.ones(2 * k + 1) / (2 * k + 1), "valid")
    rate = rng.uniform(5.0, 6.0)
    depth = rng.uniform(0.01, 0.025)
    f0 = f0 * (1.0 + depth * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)))
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    out = np.zeros(n)
    nyq = sample_rate / 2.0
    n_harm = int(nyq // f0_range[0])
    for h in range(1, n_harm + 1):
        fh = h * f0
        gain = np.zeros(n)
        for v, formants in enumerate(_FORMANTS):
            mask = vowel == v
            gain[mask] = _envelope(fh[mask], formants)
        gain *= (fh < nyq * 0.95) / h ** 0.5
        out += gain * np.sin(h * phase)
    env = np.minimum(1.0, np.minimum(t, t[-1] - t) / 0.05)
    out *= env
    out += noise * rng.normal(size=n)
    out *= 0.6 / max(np.max(np.abs(out)), 1e-9)
    return WaveBuffer(out, sample_rate)


def synth_corpus(n_clips, seed=0, duration_s=2.0, sample_rate=8000, noise=0.002):
    rng = np.random.default_rng(seed)
    return [synth_clip(rng, duration_s, sample_rate, noise=noise) for _ in range(n_clips)]
