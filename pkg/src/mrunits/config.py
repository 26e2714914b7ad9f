"""Run configuration: one JSON document, validated on load."""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .resampler import DEFAULT_W_RES, ResolutionLadder


class ConfigError(ValueError):
    pass


_TUPLE_FIELDS = {"ladder", "upsample_ratios", "resblock_kernels", "resblock_dilations",
                 "disc_channels",
                 "disc_scales", "disc_periods", "betas"}


@dataclass
class RunConfig:
    # audio and front end
    sample_rate: int = 16000
    frame_ms: float = 20.0
    n_fft: int = 1024
    n_mels: int = 80
    ssl_layers: int = 6
    feature_source: str = "pseudo"
    # resampler
    ladder: tuple = (20.0,)
    width: int = 512
    w_res: float = DEFAULT_W_RES
    # quantizer
    k: int = 1024
    kmeans_max_iters: int = 100
    kmeans_tol: float = 1e-6
    # vocoder
    gen_channels: int = 512
    upsample_ratios: tuple = (8, 5, 4, 2)
    resblock_kernels: tuple = (3, 7, 11)
    resblock_dilations: tuple = (1, 3, 5)
    disc_channels: tuple = (16, 32, 32)
    disc_scales: tuple = (1, 2)
    disc_periods: tuple = (2, 3)
    embed_dim: int = 512
    lambda_mel: float = 45.0
    lambda_fm: float = 2.0
    # optimisation
    lr: float = 2e-4
    lr_decay: float = 1.0  # per-step multiplicative decay
    betas: tuple = (0.8, 0.99)
    adam_eps: float = 1e-8
    batch_size: int = 16
    segment_frames: int = 32
    resyn_steps: int = 250000
    unit_steps: int = 250000
    unit_init_from_resyn: bool = True
    disc_start_step: int = 0
    checkpoint_interval: int = 10000
    # evaluation
    eval_split: str = "test"
    eval_frame_ms: float = 10.0
    seed: int = 0

    def __post_init__(self):
        for name in _TUPLE_FIELDS:
            value = getattr(self, name)
            if isinstance(value, str):
                value = [v for v in value.split(",") if v.strip()]
            setattr(self, name, tuple(float(v) if name in ("ladder", "betas") else int(v)
                                      for v in value))
        self.validate()

    @property
    def hop(self):
        return int(round(self.sample_rate * self.frame_ms / 1000.0))

    @property
    def resolution_ladder(self):
        return ResolutionLadder(self.ladder)

    def validate(self):
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.sample_rate > 0, "sample_rate must be positive")
        need(self.frame_ms > 0, "frame_ms must be positive")
        hop = self.sample_rate * self.frame_ms / 1000.0
        need(abs(hop - round(hop)) < 1e-9, f"frame_ms {self.frame_ms} is not a whole number of samples")
        need(math.prod(self.upsample_ratios) == self.hop,
             f"upsample_ratios {self.upsample_ratios} multiply to "
             f"{math.prod(self.upsample_ratios)}, expected hop {self.hop}")
        try:
            ladder = ResolutionLadder(self.ladder)
        except ValueError as exc:
            raise ConfigError(f"ladder: {exc}") from exc
        need(abs(ladder.resolutions_ms[0] - self.frame_ms) < 1e-9,
             f"ladder must start at frame_ms={self.frame_ms}, got {self.ladder}")
        for name in ("n_fft", "n_mels", "ssl_layers", "width", "k", "gen_channels",
                     "embed_dim", "batch_size", "kmeans_max_iters"):
            need(getattr(self, name) >= 1, f"{name} must be >= 1")
        for name in ("segment_frames", "resyn_steps", "unit_steps", "disc_start_step"):
            need(getattr(self, name) >= 0, f"{name} must be >= 0")
        need(self.checkpoint_interval >= 1, "checkpoint_interval must be >= 1")
        need(self.w_res > 0, "w_res must be positive")
        need(self.lr >= 0, "lr must be non-negative")
        need(0 < self.lr_decay <= 1, "lr_decay must be in (0, 1]")
        need(len(self.betas) == 2 and all(0 <= b < 1 for b in self.betas),
             "betas must be two values in [0, 1)")
        need(len(self.disc_channels) == 3, "disc_channels needs three widths")
        need(self.feature_source in ("pseudo", "dump"),
             "feature_source must be 'pseudo' or 'dump'")
        need(self.eval_split in ("train", "valid", "test"),
             "eval_split must be train, valid or test")
        need(self.eval_frame_ms > 0, "eval_frame_ms must be positive")
        if self.unit_init_from_resyn:
            need(self.embed_dim == self.width,
                 "unit_init_from_resyn needs embed_dim == width")

    def to_dict(self):
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v)
                for f in dataclasses.fields(self)}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**data)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path):
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n")

    def replace(self, **changes):
        merged = self.to_dict()
        merged.update(changes)
        return RunConfig.from_dict(merged)


def desk_config(**overrides):
    """Small profile that trains on a laptop CPU in minutes (8 kHz audio)."""
    base = dict(
        sample_rate=8000, frame_ms=20.0, ssl_layers=4, ladder=(20.0, 40.0, 80.0),
        width=32, k=32, gen_channels=128, upsample_ratios=(5, 4, 4, 2),
        resblock_kernels=(3,), disc_channels=(8, 16, 16), embed_dim=32,
        lr=2e-3, lr_decay=0.999, batch_size=2, segment_frames=16,
        resyn_steps=2000, unit_steps=600, checkpoint_interval=500, eval_split="train",
    )
    base.update(overrides)
    return RunConfig.from_dict(base)
