"""How many tokens does a multi-resolution ladder spend?

Builds features for a synthetic sung clip, runs an untrained resampler over
them, fits one small codebook per level and counts the resulting tokens
against a flat stack of same-rate streams.

    python demos/token_budget.py --seconds 4 --ladder 20,40,80
"""
import argparse

import numpy as np

from mrunits import engine as E
from mrunits.features import extract_pseudo_ssl
from mrunits.quantizer import kmeans_fit, tokenize_multi
from mrunits.resampler import ResolutionLadder, Resampler
from mrunits.synth import synth_corpus

parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
parser.add_argument("--seconds", type=float, default=4.0)
parser.add_argument("--ladder", default="20,40,80")
parser.add_argument("--k", type=int, default=16)
args = parser.parse_args()

ladder = ResolutionLadder.parse(args.ladder)
clip = synth_corpus(1, seed=0, duration_s=args.seconds)[0]
stack = extract_pseudo_ssl(clip, layers=4, dims=40, frame_ms=ladder.resolutions_ms[0],
                           n_fft=512)
feats = stack.data.mean(axis=0).T  # equal layer weights, (dims, frames)
print(f"clip: {args.seconds:g} s at {clip.sample_rate} Hz -> features {feats.shape}")

# %% resample: the down path shortens the sequence, the up path brings back detail
store = E.ParamStore()
resampler = Resampler(store, feats.shape[0], 16, ladder, rng=np.random.default_rng(0))
mrf = resampler(feats)
for res, x in zip(ladder.resolutions_ms, mrf.up_path):
    print(f"  {res:5g} ms level: {x.shape[1]:4d} frames")

# %% one codebook per level, then tokenize
books = [kmeans_fit([x.data], args.k, seed=i, resolution_ms=r)
         for i, (x, r) in enumerate(zip(mrf.up_path, ladder.resolutions_ms))]
tokens = tokenize_multi(mrf, books)
flat = len(ladder) * len(tokens.streams[0])

print(f"multi-resolution tokens: {tokens.total_tokens}")
print(f"same number of streams at the finest rate: {flat}")
print(f"flat / multi-resolution: {flat / tokens.total_tokens:.3f}")
print(f"nominal rate: {ladder.tokens_per_second():g} tokens/s")
