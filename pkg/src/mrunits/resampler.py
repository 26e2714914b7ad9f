"""Transfer encoder plus the down/up resampling ladder with weighted skips."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import engine as E

DEFAULT_W_RES = math.sqrt(0.4)


@dataclass(frozen=True)
class ResolutionLadder:
    """Frame durations in ms, finest first, e.g. ``(20, 40, 80)``."""

    resolutions_ms: tuple

    def __post_init__(self):
        res = tuple(float(r) for r in self.resolutions_ms)
        object.__setattr__(self, "resolutions_ms", res)
        if not res:
            raise ValueError("ladder needs at least one resolution")
        if any(r <= 0 for r in res):
            raise ValueError(f"resolutions must be positive: {res}")
        for a, b in zip(res, res[1:]):
            if b <= a:
                raise ValueError(f"ladder must be strictly increasing: {res}")
        derive_ratios(self)

    @classmethod
    def parse(cls, text):
        """Parse ``"20,40,80"``."""
        parts = [p.strip() for p in str(text).strip("()[] ").split(",") if p.strip()]
        return cls(tuple(float(p) for p in parts))

    def __len__(self):
        return len(self.resolutions_ms)

    def __str__(self):
        return ",".join(f"{r:g}" for r in self.resolutions_ms)

    @property
    def stages(self):
        return len(self.resolutions_ms) - 1

    def cumulative_ratios(self):
        """Frame-length divisor of every level relative to the finest."""
        out = [1]
        for r in derive_ratios(self)[0]:
            out.append(out[-1] * r)
        return out

    def tokens_per_second(self):
        return sum(1000.0 / r for r in self.resolutions_ms)

    def level_frames(self, frames):
        return [math.ceil(frames / c) for c in self.cumulative_ratios()]


def derive_ratios(ladder):
    """Stage ratios from adjacent quotients: ``(down, up)``; up is down reversed."""
    res = ladder.resolutions_ms if isinstance(ladder, ResolutionLadder) else tuple(ladder)
    down = []
    for a, b in zip(res, res[1:]):
        q = b / a
        if abs(q - round(q)) > 1e-9 or round(q) < 1:
            raise ValueError(f"non-integer ratio between {a:g} ms and {b:g} ms ({q:g})")
        down.append(int(round(q)))
    return down, down[::-1]


@dataclass
class MultiResFeatures:
    """``down_path[i]`` is x^(i); ``up_path[i]`` is x-hat^(i) (indexed by level)."""

    down_path: list
    up_path: list
    ladder: ResolutionLadder = field(default=None)

    def frames(self):
        return [x.shape[1] for x in self.down_path]


def level_features(mrf: MultiResFeatures, resolution_ms):
    """Up-path features at ``resolution_ms``: the inputs to discretisation."""
    for i, r in enumerate(mrf.ladder.resolutions_ms):
        if abs(r - float(resolution_ms)) < 1e-9:
            return mrf.up_path[i]
    raise KeyError(f"resolution {resolution_ms} ms not in ladder ({mrf.ladder})")


def _edge_pad_to_multiple(x, ratio):
    frames = x.shape[1]
    target = -(-frames // ratio) * ratio
    if target == frames:
        return x
    idx = np.minimum(np.arange(target), frames - 1)
    return E.take(x, idx, axis=1)


class Resampler:
    """Transfer encoder (kernel 7, stride 1) followed by the down/up ladder.

    Down stage ``i`` is a strided conv with kernel = stride = ratio; the up
    stage undoing it is the matching transposed conv. Parameters live in
    ``store`` under ``transfer.*``, ``down.<i>.*`` and ``up.<i>.*``, where
    ``up.0`` is the coarsest transition.
    """

    def __init__(self, store, in_dim, width, ladder, w_res=DEFAULT_W_RES,
                 kernel_size=7, rng=None, dtype=np.float32):
        if w_res <= 0:
            raise ValueError(f"w_res must be positive, got {w_res}")
        if kernel_size % 2 != 1:
            raise ValueError("transfer kernel_size must be odd to preserve length")
        rng = np.random.default_rng(0) if rng is None else rng
        self.store = store
        self.in_dim = in_dim
        self.width = width
        self.ladder = ladder
        self.w_res = float(w_res)
        self.kernel_size = kernel_size
        self.down_ratios, self.up_ratios = derive_ratios(ladder)
        for i, r in enumerate(self.down_ratios):
            if r != self.up_ratios[len(self.up_ratios) - 1 - i]:
                raise AssertionError(f"stage {i}: down/up ratios are not symmetric")

        def conv(name, shape, fan_in):
            store.add(f"{name}.weight", E.init_conv_weight(rng, shape, fan_in, dtype))
            store.add(f"{name}.bias", E.init_conv_weight(rng, (width,), fan_in, dtype))

        conv("transfer", (width, in_dim, kernel_size), in_dim * kernel_size)
        for i, r in enumerate(self.down_ratios):
            conv(f"down.{i}", (width, width, r), width * r)
        for i, r in enumerate(self.up_ratios):
            conv(f"up.{i}", (width, width, r), width * r)

    @property
    def stages(self):
        return len(self.down_ratios)

    def transfer_encode(self, s):
        s = E.as_tensor(s)
        if s.ndim != 2 or s.shape[0] != self.in_dim:
            raise ValueError(
                f"transfer encoder expects {self.in_dim} input channels, got shape {s.shape}")
        p = self.store
        return E.conv1d(s, p["transfer.weight"], p["transfer.bias"], stride=1,
                        padding=self.kernel_size // 2)

    def down(self, i, x):
        r = self.down_ratios[i]
        x = _edge_pad_to_multiple(x, r)
        return E.conv1d(x, self.store[f"down.{i}.weight"], self.store[f"down.{i}.bias"],
                        stride=r)

    def up(self, j, x, frames):
        r = self.up_ratios[j]
        y = E.conv_transpose1d(x, self.store[f"up.{j}.weight"], self.store[f"up.{j}.bias"],
                               stride=r)
        return y if y.shape[1] == frames else y[:, :frames]

    def forward(self, x0):
        """Run the ladder on x^(0); returns every level on both paths."""
        down_path = [E.as_tensor(x0)]
        for i in range(self.stages):
            down_path.append(self.down(i, down_path[-1]))
        t = self.stages
        up_path = [None] * (t + 1)
        up_path[t] = down_path[t]
        for j in range(t):
            level = t - j
            skip = down_path[level - 1]
            upsampled = self.up(j, up_path[level], skip.shape[1])
            if upsampled.shape != skip.shape:
                raise RuntimeError(
                    f"level {level - 1}: upsampled shape {upsampled.shape} "
                    f"!= skip shape {skip.shape}")
            up_path[level - 1] = (upsampled + skip) * self.w_res
        return MultiResFeatures(down_path, up_path, self.ladder)

    def __call__(self, s):
        return self.forward(self.transfer_encode(s))
