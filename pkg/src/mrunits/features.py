"""Multi-layer frame features: a deterministic stand-in front end, an on-disk
dump format for externally extracted stacks, and trainable layer fusion."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import engine as E
from .audio import MelAnalysis, WaveBuffer, log_mel

FEAT_MAGIC = b"SOMDFEAT"
FEAT_VERSION = 1
_HEADER = struct.Struct("<8sIfIII")
# guards against absurd headers before allocating
MAX_DUMP_ELEMENTS = 1 << 31


class FeatureDumpError(ValueError):
    pass


@dataclass
class LayerStack:
    """``data`` is ``(layers, frames, dims)``."""

    data: np.ndarray
    frame_ms: float

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"layer stack must be rank 3, got shape {self.data.shape}")
        if self.frame_ms <= 0:
            raise ValueError(f"frame_ms must be positive, got {self.frame_ms}")

    @property
    def layers(self):
        return self.data.shape[0]

    @property
    def frames(self):
        return self.data.shape[1]

    @property
    def dims(self):
        return self.data.shape[2]

    def channels_first(self):
        """``(layers, dims, frames)`` view for sequence ops."""
        return self.data.transpose(0, 2, 1)


def _moving_average(x, width):
    # x: (frames, dims); edge replication keeps constants fixed
    half = width // 2
    padded = np.pad(x, ((half, half), (0, 0)), mode="edge")
    csum = np.cumsum(np.vstack([np.zeros((1, x.shape[1])), padded]), axis=0)
    return (csum[width:] - csum[:-width]) / width


def extract_pseudo_ssl(wave: WaveBuffer, layers=6, dims=80, frame_ms=20.0, n_fft=1024):
    """Stand-in for a frozen pretrained encoder.

    Layer 0 is the log-mel spectrogram; layer ``i`` smooths layer ``i-1``
    with a centred moving average of width ``2i + 1`` frames, so temporal
    context widens with depth.
    """
    if layers < 1:
        raise ValueError("layers must be >= 1")
    analysis = MelAnalysis(wave.sample_rate, frame_ms, n_fft, dims)
    n_frames = analysis.n_frames(len(wave.samples))
    if n_frames < 2:
        raise ValueError(
            f"audio of {len(wave.samples)} samples is shorter than two "
            f"{frame_ms} ms frames")
    current = log_mel(wave.samples, analysis).T
    out = [current]
    for i in range(1, layers):
        current = _moving_average(current, 2 * i + 1)
        out.append(current)
    return LayerStack(np.stack(out).astype(np.float32), float(frame_ms))


def save_feature_dump(path, stack: LayerStack):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = _HEADER.pack(FEAT_MAGIC, FEAT_VERSION, stack.frame_ms,
                          stack.layers, stack.frames, stack.dims)
    payload = np.ascontiguousarray(stack.data, dtype="<f4").tobytes()
    path.write_bytes(header + payload)


def load_feature_dump(path):
    buf = Path(path).read_bytes()
    if len(buf) < 8 or buf[:8] != FEAT_MAGIC:
        raise FeatureDumpError(f"{path}: bad magic, not a SOMDFEAT file")
    if len(buf) < _HEADER.size:
        raise FeatureDumpError(f"{path}: truncated header")
    _, version, frame_ms, n_layers, n_frames, n_dims = _HEADER.unpack_from(buf)
    if version != FEAT_VERSION:
        raise FeatureDumpError(f"{path}: unsupported version {version}")
    count = n_layers * n_frames * n_dims
    if count > MAX_DUMP_ELEMENTS:
        raise FeatureDumpError(
            f"{path}: dimension overflow ({n_layers}x{n_frames}x{n_dims})")
    need = _HEADER.size + 4 * count
    if len(buf) < need:
        raise FeatureDumpError(
            f"{path}: truncated payload ({len(buf) - _HEADER.size} of {4 * count} bytes)")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=_HEADER.size)
    return LayerStack(data.reshape(n_layers, n_frames, n_dims).astype(np.float32),
                      float(frame_ms))


class LayerWeights:
    """Trainable fusion logits; effective weights are ``softmax(logits)``."""

    def __init__(self, store: E.ParamStore, layers, name="layer_logits", dtype=np.float32):
        self.name = name
        self.logits = store.add(name, np.zeros(layers, dtype=dtype)) \
            if name not in store else store[name]

    def weights(self):
        return E.softmax(self.logits).data


def weighted_sum(stack, logits):
    """Fuse layers into a ``(dims, frames)`` sequence.

    ``stack`` is a :class:`LayerStack` or an array shaped
    ``(layers, frames, dims)``; ``logits`` a tensor of length ``layers``.
    """
    data = stack.data if isinstance(stack, LayerStack) else np.asarray(stack)
    logits = logits.logits if isinstance(logits, LayerWeights) else E.as_tensor(logits)
    n_layers, n_frames, n_dims = data.shape
    if logits.shape != (n_layers,):
        raise ValueError(
            f"weights length {logits.shape[0] if logits.ndim else 0} != "
            f"stack layers {n_layers}")
    w = E.reshape(E.softmax(logits), (1, n_layers))
    flat = data.transpose(0, 2, 1).reshape(n_layers, n_dims * n_frames).astype(logits.dtype)
    return E.reshape(E.matmul(w, flat), (n_dims, n_frames))
