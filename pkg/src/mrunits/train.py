"""Adversarial resynthesis training for both generator input modes.

Continuous mode fits the layer-fusion logits, transfer encoder, resampler
and generator jointly on frozen front-end features. Token mode fits the
unit embedder and generator on frozen token streams.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import engine as E
from .audio import MelAnalysis
from .config import RunConfig
from .features import LayerWeights, weighted_sum
from .resampler import Resampler
from .vocoder import (DiscriminatorConfig, DiscriminatorSet, Generator, GeneratorConfig,
                      UnitEmbedder, embed_tokens, feature_matching_loss,
                      lsgan_discriminator_loss, lsgan_generator_loss, loss_mel)

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "l_mel", "l_fm", "l_adv_g", "l_adv_d")


class NumericError(RuntimeError):
    """A loss became non-finite."""


def generator_config(cfg: RunConfig, input_dim):
    return GeneratorConfig(input_dim=input_dim, base_channels=cfg.gen_channels,
                           upsample_ratios=cfg.upsample_ratios,
                           resblock_kernel_sizes=cfg.resblock_kernels,
                           resblock_dilations=cfg.resblock_dilations)


class ResynthesisModel:
    """Layer fusion -> transfer encoder -> resampler -> generator."""

    mode = "continuous"

    def __init__(self, cfg: RunConfig, in_dim=None, layers=None, dtype=np.float32):
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.store = E.ParamStore()
        in_dim = cfg.n_mels if in_dim is None else in_dim
        layers = cfg.ssl_layers if layers is None else layers
        self.fusion = LayerWeights(self.store, layers, dtype=dtype)
        self.resampler = Resampler(self.store, in_dim, cfg.width, cfg.resolution_ladder,
                                   cfg.w_res, rng=rng, dtype=dtype)
        self.generator = Generator(self.store, generator_config(cfg, cfg.width), rng=rng,
                                   dtype=dtype)

    def multires(self, stack):
        return self.resampler(weighted_sum(stack, self.fusion))

    def condition(self, stack):
        return self.multires(stack).up_path[0]


class UnitVocoderModel:
    """Token embedding -> generator."""

    mode = "tokens"

    def __init__(self, cfg: RunConfig, table_sizes, dtype=np.float32):
        rng = np.random.default_rng(cfg.seed + 1)
        self.cfg = cfg
        self.store = E.ParamStore()
        self.embedder = UnitEmbedder(self.store, table_sizes, cfg.embed_dim, rng=rng,
                                     dtype=dtype)
        self.generator = Generator(self.store, generator_config(cfg, cfg.embed_dim), rng=rng,
                                   dtype=dtype)

    def condition(self, tokens):
        return embed_tokens(tokens, self.embedder)


def make_discriminators(cfg: RunConfig, dtype=np.float32):
    store = E.ParamStore()
    dcfg = DiscriminatorConfig(cfg.disc_scales, cfg.disc_periods, cfg.disc_channels)
    discs = DiscriminatorSet(store, dcfg, rng=np.random.default_rng(cfg.seed + 2), dtype=dtype)
    return store, discs


@dataclass
class TrainResult:
    trace: list = field(default_factory=list)
    eval_mel_initial: float = float("nan")
    eval_mel_final: float = float("nan")
    steps: int = 0


def evaluate_mel(model, items, analysis):
    """Mean full-utterance mel loss without gradient tracking."""
    vals = []
    with E.no_grad():
        for item in items:
            fake = model.generator(model.condition(item["input"]))
            vals.append(loss_mel(item["wave"], fake, analysis).item())
    return float(np.mean(vals))


def _segment(cond, wave, hop, seg_frames, rng):
    n_frames = cond.shape[1]
    if seg_frames <= 0 or seg_frames >= n_frames:
        return cond, wave[: n_frames * hop]
    start = int(rng.integers(0, n_frames - seg_frames + 1))
    return (cond[:, start:start + seg_frames],
            wave[start * hop:(start + seg_frames) * hop])


def write_trace(path, trace):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_COLUMNS)
        for row in trace:
            w.writerow([row[0]] + [f"{v:.6f}" for v in row[1:]])


def train(model, items, cfg: RunConfig, steps, out_dir=None, disc=None, progress=None):
    """Run ``steps`` alternating discriminator/generator updates.

    ``items`` are dicts with ``"input"`` (whatever ``model.condition``
    takes) and ``"wave"`` (float samples). Total generator loss is
    ``adv_g + lambda_fm * fm + lambda_mel * mel``. Writes ``loss.csv`` and
    checkpoints under ``out_dir`` when given.
    """
    if not items:
        raise ValueError("training set is empty")
    dtype = next(iter(model.store.params.values())).dtype
    analysis = MelAnalysis(cfg.sample_rate, cfg.frame_ms, cfg.n_fft, cfg.n_mels)
    hop = cfg.hop
    rng = np.random.default_rng(cfg.seed + 7)
    d_store, discs = disc if disc is not None else make_discriminators(cfg, dtype)
    waves = [np.asarray(it["wave"], dtype=dtype) for it in items]
    out_dir = Path(out_dir) if out_dir is not None else None
    result = TrainResult()
    result.eval_mel_initial = evaluate_mel(model, items, analysis)

    for step in range(steps):
        lr = cfg.lr * cfg.lr_decay ** step
        use_adv = step >= cfg.disc_start_step
        pairs = []
        for _ in range(cfg.batch_size):
            i = int(rng.integers(len(items)))
            cond = model.condition(items[i]["input"])
            c, real = _segment(cond, waves[i], hop, cfg.segment_frames, rng)
            fake = model.generator(c)
            pairs.append((E.Tensor(real[None, :]), fake))
        scale = 1.0 / len(pairs)

        l_adv_d = 0.0
        if use_adv:
            d_store.zero_grad()
            for real, fake in pairs:
                d_real = discs(real)
                d_fake = discs(fake.detach())
                loss_d = lsgan_discriminator_loss([o for o, _ in d_real],
                                                  [o for o, _ in d_fake]) * scale
                loss_d.backward()
                l_adv_d += loss_d.item()
            E.adam_step(d_store, d_store.grads(), lr, cfg.betas, cfg.adam_eps)

        model.store.zero_grad()
        l_mel = l_fm = l_adv_g = 0.0
        for real, fake in pairs:
            mel = loss_mel(real, fake, analysis)
            total = mel * cfg.lambda_mel
            if use_adv:
                with E.no_grad():
                    d_real = discs(real)
                d_fake = discs(fake)
                adv = lsgan_generator_loss([o for o, _ in d_fake])
                fm = feature_matching_loss([f for _, f in d_real], [f for _, f in d_fake])
                total = total + adv + fm * cfg.lambda_fm
                l_adv_g += adv.item() * scale
                l_fm += fm.item() * scale
            (total * scale).backward()
            l_mel += mel.item() * scale
        row = (step, l_mel, l_fm, l_adv_g, l_adv_d)
        if not all(math.isfinite(v) for v in row[1:]):
            raise NumericError(f"non-finite loss at step {step}: {row[1:]}")
        E.adam_step(model.store, model.store.grads(), lr, cfg.betas, cfg.adam_eps)
        result.trace.append(row)
        if progress is not None:
            progress(row)
        if out_dir is not None and (step + 1) % cfg.checkpoint_interval == 0:
            E.save_checkpoint(out_dir / f"model_{step + 1:07d}.ckpt", model.store.state())

    result.steps = steps
    result.eval_mel_final = evaluate_mel(model, items, analysis)
    if out_dir is not None:
        E.save_checkpoint(out_dir / "model.ckpt", model.store.state())
        E.save_checkpoint(out_dir / "disc.ckpt", d_store.state())
        write_trace(out_dir / "loss.csv", result.trace)
    return result


def load_generator_state(model, state):
    """Copy ``gen.*`` entries from a checkpoint into ``model``."""
    gen_state = {k: v for k, v in state.items() if k.startswith("gen.")}
    for name in model.store.names("gen."):
        if name not in gen_state:
            raise KeyError(f"checkpoint lacks {name!r}")
        model.store[name].data = gen_state[name].astype(model.store[name].dtype).copy()
