"""K-means codebooks per resolution and conversion to/from token streams."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .resampler import MultiResFeatures, ResolutionLadder

log = logging.getLogger(__name__)

CODEBOOK_MAGIC = b"SOMDCDBK"
CODEBOOK_VERSION = 1
_HEADER = struct.Struct("<8sIfII")
# rows per distance chunk scale with k * dims to bound memory
_CHUNK_ELEMENTS = 1 << 22


class CodebookError(ValueError):
    pass


@dataclass
class Codebook:
    centroids: np.ndarray
    resolution_ms: float = 20.0
    distortion: float = float("nan")
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.centroids = np.ascontiguousarray(self.centroids, dtype=np.float32)
        if self.centroids.ndim != 2:
            raise CodebookError(f"centroids must be (k, dims), got {self.centroids.shape}")
        if not np.all(np.isfinite(self.centroids)):
            raise CodebookError("centroids contain non-finite values")

    @property
    def k(self):
        return self.centroids.shape[0]

    @property
    def dims(self):
        return self.centroids.shape[1]

    @property
    def content_hash(self):
        h = hashlib.sha256()
        h.update(struct.pack("<fII", self.resolution_ms, self.k, self.dims))
        h.update(self.centroids.astype("<f4").tobytes())
        return h.hexdigest()[:16]


def _as_frames(features):
    """Stack ``(dims, T)`` sequences (or an ``(N, dims)`` array) into rows."""
    if isinstance(features, np.ndarray) and features.ndim == 2:
        return np.asarray(features, dtype=np.float64)
    seqs = [np.asarray(getattr(f, "data", f), dtype=np.float64) for f in features]
    return np.concatenate([s.T for s in seqs], axis=0)


def _chunk_rows(k, dims):
    return max(1, _CHUNK_ELEMENTS // max(1, k * dims))


def nearest(frames, centroids):
    """Nearest-centroid ids and squared distances; ties go to the lowest id.

    Distances are formed from explicit differences, so exactly equidistant
    centroids compare equal and ``argmin`` keeps the first.
    """
    frames = np.asarray(frames, dtype=np.float64)
    centroids = np.asarray(centroids, dtype=np.float64)
    n = frames.shape[0]
    ids = np.empty(n, dtype=np.int64)
    dist = np.empty(n, dtype=np.float64)
    step = _chunk_rows(*centroids.shape)
    for lo in range(0, n, step):
        diff = frames[lo:lo + step, None, :] - centroids[None, :, :]
        d = np.einsum("nkd,nkd->nk", diff, diff)
        ids[lo:lo + step] = np.argmin(d, axis=1)
        dist[lo:lo + step] = d[np.arange(d.shape[0]), ids[lo:lo + step]]
    return ids, dist


def _kmeanspp(x, k, rng):
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = np.sum((x - x[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # every point already coincides with a centre
            idx = int(np.argmax(d2))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        chosen.append(idx)
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return x[chosen].copy()


def _update(x, ids, k, centroids, dist):
    dims = x.shape[1]
    counts = np.bincount(ids, minlength=k)
    sums = np.zeros((k, dims))
    step = _chunk_rows(k, dims)
    for lo in range(0, x.shape[0], step):
        np.add.at(sums, ids[lo:lo + step], x[lo:lo + step])
    new = centroids.copy()
    live = counts > 0
    new[live] = sums[live] / counts[live, None]
    empty = np.flatnonzero(~live)
    if empty.size:
        # reseed each empty cluster with the worst-served remaining point
        order = np.argsort(-dist, kind="stable")
        for c, idx in zip(empty, order):
            new[c] = x[idx]
    return new, int(empty.size)


def kmeans_fit(features, k, seed=0, max_iters=100, tol=1e-6, resolution_ms=20.0):
    """Lloyd iterations from a seeded k-means++ start.

    Stops after ``max_iters`` or once the relative drop in mean squared
    distortion falls below ``tol``. The returned codebook carries the
    final distortion and the per-iteration history.
    """
    x = _as_frames(features)
    if x.shape[0] < 1:
        raise CodebookError("need at least one frame")
    if k < 1:
        raise CodebookError(f"k must be >= 1, got {k}")
    n_distinct = np.unique(x, axis=0).shape[0]
    if k > n_distinct:
        log.warning("k=%d exceeds the %d distinct frames; duplicate centroids remain",
                    k, n_distinct)
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp(x, k, rng)
    history = []
    for it in range(max_iters + 1):
        ids, dist = nearest(x, centroids)
        distortion = float(dist.mean())
        if history and distortion > history[-1] * (1.0 + 1e-12) + 1e-300:
            raise RuntimeError(
                f"Lloyd distortion increased at iteration {it}: "
                f"{history[-1]:.6g} -> {distortion:.6g}")
        prev = history[-1] if history else None
        history.append(distortion)
        if prev is not None and prev - distortion <= tol * prev:
            break
        if distortion == 0.0 or it == max_iters:
            break
        centroids, n_empty = _update(x, ids, k, centroids, dist)
        if n_empty:
            log.debug("iteration %d: reseeded %d empty clusters", it, n_empty)
    return Codebook(centroids, float(resolution_ms), distortion, history)


def tokenize(features, codebook: Codebook):
    """Per-frame nearest centroid id for a ``(dims, T)`` sequence."""
    data = np.asarray(getattr(features, "data", features))
    if data.ndim != 2 or data.shape[0] != codebook.dims:
        raise CodebookError(
            f"feature dims {data.shape[0] if data.ndim == 2 else data.shape} "
            f"!= codebook dims {codebook.dims}")
    ids, _ = nearest(data.T, codebook.centroids)
    return ids


def detokenize(ids, codebook: Codebook):
    """Centroid sequence ``(dims, T)`` for ``ids``."""
    ids = np.asarray(ids, dtype=np.int64)
    bad = np.flatnonzero((ids < 0) | (ids >= codebook.k))
    if bad.size:
        raise CodebookError(
            f"id {int(ids[bad[0]])} at position {int(bad[0])} out of range for k={codebook.k}")
    return codebook.centroids[ids].T.copy()


@dataclass
class TokenStreams:
    ladder: ResolutionLadder
    streams: list
    codebooks: list
    utt_id: str = ""

    def __post_init__(self):
        self.streams = [np.asarray(s, dtype=np.int64) for s in self.streams]
        if len(self.streams) != len(self.ladder):
            raise ValueError(f"{len(self.streams)} streams for a {len(self.ladder)}-level ladder")

    @property
    def total_tokens(self):
        return int(sum(len(s) for s in self.streams))

    def to_json(self):
        return json.dumps({
            "ladder_ms": [float(r) for r in self.ladder.resolutions_ms],
            "streams": [[int(i) for i in s] for s in self.streams],
            "codebooks": list(self.codebooks),
            "utt_id": self.utt_id,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        obj = json.loads(text)
        return cls(ResolutionLadder(tuple(obj["ladder_ms"])), obj["streams"],
                   obj["codebooks"], obj.get("utt_id", ""))

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_json(Path(path).read_text())


def stream_lengths(frames, ladder: ResolutionLadder):
    return [math.ceil(frames / c) for c in ladder.cumulative_ratios()]


def tokenize_multi(mrf: MultiResFeatures, books, utt_id=""):
    """One stream per ladder level from the up-path features."""
    ladder = mrf.ladder
    if len(books) != len(ladder):
        raise CodebookError(
            f"missing codebook: {len(books)} codebooks for {len(ladder)} ladder levels")
    streams = []
    for level, (res, book) in enumerate(zip(ladder.resolutions_ms, books)):
        if book is None:
            raise CodebookError(f"missing codebook for level {level} ({res:g} ms)")
        streams.append(tokenize(mrf.up_path[level], book))
    return TokenStreams(ladder, streams, [b.content_hash for b in books], utt_id)


def save_codebook(path, book: Codebook):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = _HEADER.pack(CODEBOOK_MAGIC, CODEBOOK_VERSION, book.resolution_ms, book.k, book.dims)
    body += book.centroids.astype("<f4").tobytes()
    path.write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_codebook(path):
    buf = Path(path).read_bytes()
    if buf[:8] != CODEBOOK_MAGIC:
        raise CodebookError(f"{path}: bad magic, not a codebook file")
    if len(buf) < _HEADER.size + 4:
        raise CodebookError(f"{path}: truncated header")
    _, version, res, k, dims = _HEADER.unpack_from(buf)
    if version != CODEBOOK_VERSION:
        raise CodebookError(f"{path}: unsupported version {version}")
    need = _HEADER.size + 4 * k * dims + 4
    if len(buf) != need:
        raise CodebookError(f"{path}: expected {need} bytes, found {len(buf)}")
    (crc,) = struct.unpack_from("<I", buf, need - 4)
    if zlib.crc32(buf[:need - 4]) != crc:
        raise CodebookError(f"{path}: CRC mismatch")
    cents = np.frombuffer(buf, dtype="<f4", count=k * dims, offset=_HEADER.size)
    return Codebook(cents.reshape(k, dims), float(res))
