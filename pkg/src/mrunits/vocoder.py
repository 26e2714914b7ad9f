"""HiFi-GAN style generator and discriminators, token embedding, and losses."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from .audio import MelAnalysis, WaveBuffer, log_mel_tensor

LRELU_SLOPE = 0.1


@dataclass(frozen=True)
class GeneratorConfig:
    input_dim: int = 512
    base_channels: int = 512
    upsample_ratios: tuple = (8, 5, 4, 2)
    resblock_kernel_sizes: tuple = (3, 7, 11)
    resblock_dilations: tuple = (1, 3, 5)
    pre_kernel: int = 7

    def __post_init__(self):
        if self.input_dim < 1 or self.base_channels < 1:
            raise ValueError("input_dim and base_channels must be positive")
        if not self.upsample_ratios or any(int(r) < 1 for r in self.upsample_ratios):
            raise ValueError(f"bad upsample_ratios {self.upsample_ratios}")
        if any(k % 2 != 1 for k in self.resblock_kernel_sizes):
            raise ValueError("residual block kernels must be odd")
        object.__setattr__(self, "upsample_ratios", tuple(int(r) for r in self.upsample_ratios))
        object.__setattr__(self, "resblock_kernel_sizes",
                           tuple(int(k) for k in self.resblock_kernel_sizes))
        object.__setattr__(self, "resblock_dilations",
                           tuple(int(d) for d in self.resblock_dilations))

    @property
    def hop(self):
        return math.prod(self.upsample_ratios)

    def channels(self, stage):
        return max(self.base_channels >> (stage + 1), 1)


def _add_conv(store, rng, name, out_ch, in_ch, k, dtype, transposed=False):
    shape = (in_ch, out_ch, k) if transposed else (out_ch, in_ch, k)
    fan_in = in_ch * k
    store.add(f"{name}.weight", E.init_conv_weight(rng, shape, fan_in, dtype))
    store.add(f"{name}.bias", E.init_conv_weight(rng, (out_ch,), fan_in, dtype))


class Generator:
    """Frame features ``(input_dim, T)`` to a waveform of ``T * hop`` samples.

    Each stage is leaky-ReLU, a transposed conv (kernel ``2r``, stride ``r``)
    and a bank of residual blocks (one per kernel size) whose outputs are
    averaged. A block chains one dilated/undilated conv pair per dilation.
    """

    def __init__(self, store, config: GeneratorConfig, rng=None, prefix="gen",
                 dtype=np.float32):
        rng = np.random.default_rng(0) if rng is None else rng
        self.store = store
        self.config = config
        self.prefix = prefix
        c = config
        _add_conv(store, rng, f"{prefix}.pre", c.base_channels, c.input_dim,
                  c.pre_kernel, dtype)
        ch_in = c.base_channels
        for i, r in enumerate(c.upsample_ratios):
            ch = c.channels(i)
            _add_conv(store, rng, f"{prefix}.up.{i}", ch, ch_in, 2 * r, dtype,
                      transposed=True)
            for j, k in enumerate(c.resblock_kernel_sizes):
                for m, _ in enumerate(c.resblock_dilations):
                    _add_conv(store, rng, f"{prefix}.res.{i}.{j}.{m}.a", ch, ch, k, dtype)
                    _add_conv(store, rng, f"{prefix}.res.{i}.{j}.{m}.b", ch, ch, k, dtype)
            ch_in = ch
        _add_conv(store, rng, f"{prefix}.post", 1, ch_in, 7, dtype)

    def _conv(self, name, x, **kw):
        p = self.store
        return E.conv1d(x, p[f"{self.prefix}.{name}.weight"], p[f"{self.prefix}.{name}.bias"], **kw)

    def forward(self, features):
        """Return a ``(1, T * hop)`` tensor in ``[-1, 1]``."""
        x = E.as_tensor(features)
        c = self.config
        if x.ndim != 2 or x.shape[0] != c.input_dim:
            raise ValueError(
                f"generator expects {c.input_dim} input channels, got shape {x.shape}")
        p = self.store
        x = self._conv("pre", x, padding=c.pre_kernel // 2)
        for i, r in enumerate(c.upsample_ratios):
            n_out = x.shape[1] * r
            x = E.leaky_relu(x, LRELU_SLOPE)
            x = E.conv_transpose1d(x, p[f"{self.prefix}.up.{i}.weight"],
                                   p[f"{self.prefix}.up.{i}.bias"], stride=r,
                                   padding=r // 2)
            if x.shape[1] != n_out:
                x = x[:, :n_out]
            acc = None
            for j, k in enumerate(c.resblock_kernel_sizes):
                h = x
                for m, d in enumerate(c.resblock_dilations):
                    res = self._conv(f"res.{i}.{j}.{m}.a", E.leaky_relu(h, LRELU_SLOPE),
                                    padding=d * (k // 2), dilation=d)
                    res = self._conv(f"res.{i}.{j}.{m}.b", E.leaky_relu(res, LRELU_SLOPE),
                                    padding=k // 2)
                    h = h + res
                acc = h if acc is None else acc + h
            x = acc * (1.0 / len(c.resblock_kernel_sizes))
        x = E.leaky_relu(x, LRELU_SLOPE)
        x = self._conv("post", x, padding=3)
        return E.tanh(x)

    __call__ = forward


def generate(features, generator: Generator, sample_rate):
    """Synthesize a :class:`WaveBuffer` without building a gradient graph."""
    feats = features.data if isinstance(features, E.Tensor) else np.asarray(features)
    out = generator.forward(E.Tensor(feats.astype(np.float32)))
    return WaveBuffer(out.data[0].astype(np.float64), sample_rate)


# discriminators ------------------------------------------------------------

class _ConvStack:
    """Shared conv stack used by both discriminator families."""

    def __init__(self, store, rng, prefix, layers, dtype):
        # layers: list of (out, in, kernel, stride)
        self.store = store
        self.prefix = prefix
        self.layers = layers
        for i, (o, ci, k, s) in enumerate(layers):
            _add_conv(store, rng, f"{prefix}.{i}", o, ci, k, dtype)

    def __call__(self, x):
        feats = []
        n = len(self.layers)
        for i, (_, _, k, s) in enumerate(self.layers):
            x = E.conv1d(x, self.store[f"{self.prefix}.{i}.weight"],
                         self.store[f"{self.prefix}.{i}.bias"], stride=s, padding=k // 2)
            if i < n - 1:
                x = E.leaky_relu(x, LRELU_SLOPE)
            feats.append(x)
        return x, feats


class ScaleDiscriminator:
    """Average-pools the waveform by ``factor`` then applies a strided stack."""

    def __init__(self, store, rng, prefix, factor=1, channels=(16, 32, 32), dtype=np.float32):
        self.factor = factor
        c1, c2, c3 = channels
        self.stack = _ConvStack(store, rng, prefix, [
            (c1, 1, 15, 1), (c2, c1, 9, 4), (c3, c2, 9, 4), (c3, c3, 5, 1), (1, c3, 3, 1),
        ], dtype)

    def __call__(self, wav):
        x = wav
        if self.factor > 1:
            f = self.factor
            pool = np.full((1, 1, 2 * f), 1.0 / (2 * f), dtype=wav.dtype)
            x = E.conv1d(x, pool, stride=f, padding=f // 2)
        return self.stack(x)


class PeriodDiscriminator:
    """Folds the waveform into ``period`` phase sequences sharing one stack."""

    def __init__(self, store, rng, prefix, period=2, channels=(16, 32, 32), dtype=np.float32):
        self.period = period
        c1, c2, c3 = channels
        self.stack = _ConvStack(store, rng, prefix, [
            (c1, 1, 5, 3), (c2, c1, 5, 3), (c3, c2, 5, 1), (1, c3, 3, 1),
        ], dtype)

    def __call__(self, wav):
        n = wav.shape[1]
        p = self.period
        target = -(-n // p) * p
        x = wav
        if target != n:
            # reflect-pad the tail
            idx = np.concatenate([np.arange(n), n - 2 - np.arange(target - n)])
            x = E.take(x, np.clip(idx, 0, n - 1), axis=1)
        outs = []
        feats = None
        for phase in range(p):
            seq = E.take(x, np.arange(phase, target, p), axis=1)
            out, f = self.stack(seq)
            outs.append(out)
            feats = [[fi] for fi in f] if feats is None else [a + [fi] for a, fi in zip(feats, f)]
        return E.concat(outs, axis=1), [E.concat(group, axis=1) for group in feats]


@dataclass
class DiscriminatorConfig:
    scale_factors: tuple = (1, 2)
    periods: tuple = (2, 3)
    channels: tuple = (16, 32, 32)


class DiscriminatorSet:
    """Scale and period discriminators; every member exposes its feature maps."""

    def __init__(self, store, config: DiscriminatorConfig = None, rng=None, prefix="disc",
                 dtype=np.float32):
        config = DiscriminatorConfig() if config is None else config
        rng = np.random.default_rng(1) if rng is None else rng
        self.store = store
        self.prefix = prefix
        self.members = []
        for f in config.scale_factors:
            self.members.append(ScaleDiscriminator(store, rng, f"{prefix}.scale{f}", f,
                                                   tuple(config.channels), dtype))
        for p in config.periods:
            self.members.append(PeriodDiscriminator(store, rng, f"{prefix}.period{p}", p,
                                                    tuple(config.channels), dtype))

    def __call__(self, wav):
        """``wav`` is ``(1, N)``; returns a list of ``(output, feature_maps)``."""
        wav = E.as_tensor(wav)
        if wav.ndim == 1:
            wav = E.reshape(wav, (1, wav.shape[0]))
        return [m(wav) for m in self.members]


# token embedding ------------------------------------------------------------

class UnitEmbedder:
    """One embedding table per token stream plus softmax fusion logits."""

    def __init__(self, store, table_sizes, width=512, rng=None, prefix="embed",
                 dtype=np.float32):
        rng = np.random.default_rng(2) if rng is None else rng
        self.store = store
        self.prefix = prefix
        self.width = width
        self.table_sizes = tuple(int(k) for k in table_sizes)
        for i, k in enumerate(self.table_sizes):
            store.add(f"{prefix}.{i}.table", rng.normal(0.0, 1.0, size=(k, width)).astype(dtype))
        store.add(f"{prefix}.fusion_logits", np.zeros(len(self.table_sizes), dtype=dtype))

    def table(self, i):
        return self.store[f"{self.prefix}.{i}.table"]

    @property
    def fusion_logits(self):
        return self.store[f"{self.prefix}.fusion_logits"]

    def fusion_weights(self):
        return E.softmax(self.fusion_logits).data


def embed_tokens(streams, embedder: UnitEmbedder, cumulative_ratios=None):
    """Embed each stream, repeat coarse streams up to the finest rate, fuse.

    ``streams`` is a :class:`~mrunits.quantizer.TokenStreams` or a list of
    id sequences (finest first). Returns ``(width, T_finest)``.
    """
    if hasattr(streams, "streams"):
        id_lists = streams.streams
        if cumulative_ratios is None:
            cumulative_ratios = streams.ladder.cumulative_ratios()
    else:
        id_lists = streams
    if len(id_lists) != len(embedder.table_sizes):
        raise ValueError(
            f"{len(id_lists)} streams but embedder has {len(embedder.table_sizes)} tables")
    if cumulative_ratios is None:
        n0 = len(id_lists[0])
        cumulative_ratios = [max(1, round(n0 / max(len(s), 1))) for s in id_lists]
    n_frames = len(id_lists[0])
    weights = E.softmax(embedder.fusion_logits)
    fused = None
    for i, ids in enumerate(id_lists):
        ids = np.asarray(ids, dtype=np.int64)
        k = embedder.table_sizes[i]
        bad = np.flatnonzero((ids < 0) | (ids >= k))
        if bad.size:
            raise ValueError(
                f"stream {i}, position {int(bad[0])}: id {int(ids[bad[0]])} "
                f"out of range for table of size {k}")
        frame_src = np.minimum(np.arange(n_frames) // cumulative_ratios[i], len(ids) - 1)
        emb = E.take(embedder.table(i), ids[frame_src], axis=0)  # (T, width)
        term = E.transpose(emb) * weights[i]
        fused = term if fused is None else fused + term
    return fused


# losses --------------------------------------------------------------------

def _crop_pair(real, fake):
    real = E.as_tensor(real)
    fake = E.as_tensor(fake)
    if real.ndim == 1:
        real = E.reshape(real, (1, real.shape[0]))
    if fake.ndim == 1:
        fake = E.reshape(fake, (1, fake.shape[0]))
    n = min(real.shape[1], fake.shape[1])
    if n < 1:
        raise ValueError("real and fake waveforms do not overlap")
    if real.shape[1] != n:
        real = real[:, :n]
    if fake.shape[1] != n:
        fake = fake[:, :n]
    return real, fake


def loss_mel(real, fake, analysis: MelAnalysis):
    """Mean absolute log-mel difference (same analysis as the features)."""
    if isinstance(real, WaveBuffer):
        real = real.samples
    if isinstance(fake, WaveBuffer):
        fake = fake.samples
    real, fake = _crop_pair(real, fake)
    if real.shape[1] < analysis.hop:
        raise ValueError("overlap shorter than one analysis frame")
    mr = log_mel_tensor(real.detach() if real.requires_grad else real, analysis)
    mf = log_mel_tensor(fake, analysis)
    return E.tabs(mf - mr).mean()


def lsgan_generator_loss(fake_outputs):
    total = None
    for out in fake_outputs:
        term = ((out - 1.0) * (out - 1.0)).mean()
        total = term if total is None else total + term
    return total


def lsgan_discriminator_loss(real_outputs, fake_outputs):
    total = None
    for r, f in zip(real_outputs, fake_outputs):
        term = ((r - 1.0) * (r - 1.0)).mean() + (f * f).mean()
        total = term if total is None else total + term
    return total


def feature_matching_loss(real_feats, fake_feats):
    """Sum over discriminators and layers of the mean absolute feature gap."""
    total = None
    for fr_list, ff_list in zip(real_feats, fake_feats):
        for fr, ff in zip(fr_list, ff_list):
            term = E.tabs(ff - fr.detach()).mean()
            total = term if total is None else total + term
    return total


def loss_adv_and_fm(real, fake, discs: DiscriminatorSet):
    """LSGAN generator/discriminator terms and feature matching, as floats."""
    if isinstance(real, WaveBuffer):
        real = real.samples
    if isinstance(fake, WaveBuffer):
        fake = fake.samples
    real, fake = _crop_pair(E.Tensor(np.asarray(E.as_tensor(real).data)),
                            E.Tensor(np.asarray(E.as_tensor(fake).data)))
    d_real = discs(real)
    d_fake = discs(fake)
    adv_g = lsgan_generator_loss([o for o, _ in d_fake])
    adv_d = lsgan_discriminator_loss([o for o, _ in d_real], [o for o, _ in d_fake])
    fm = feature_matching_loss([f for _, f in d_real], [f for _, f in d_fake])
    return adv_g.item(), adv_d.item(), fm.item()
