import json
import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mrunits import engine as E
from mrunits.quantizer import (Codebook, CodebookError, TokenStreams, detokenize, kmeans_fit,
                               load_codebook, nearest, save_codebook, stream_lengths, tokenize,
                               tokenize_multi)
from mrunits.resampler import ResolutionLadder, Resampler


def _book(centroids, res=20.0):
    return Codebook(np.asarray(centroids, dtype=np.float32), res, 0.0, [])


def test_k_equals_distinct_points(rng):
    x = rng.normal(size=(12, 3))
    book = kmeans_fit(x, 12, seed=0)
    assert book.distortion == 0.0
    assert sorted(map(tuple, book.centroids)) == sorted(map(tuple, x.astype(np.float32)))


def test_two_blobs(rng):
    a = rng.normal(scale=0.1, size=(50, 2)) + 10
    b = rng.normal(scale=0.1, size=(50, 2)) - 10
    book = kmeans_fit(np.vstack([a, b]), 2, seed=3)
    got = sorted(book.centroids.tolist())
    np.testing.assert_allclose(got[0], b.mean(axis=0), atol=0.2)
    np.testing.assert_allclose(got[1], a.mean(axis=0), atol=0.2)


def test_single_centroid_is_mean(rng):
    x = rng.normal(size=(40, 5))
    book = kmeans_fit(x, 1)
    np.testing.assert_allclose(book.centroids[0], x.mean(axis=0), rtol=1e-6, atol=1e-6)


@pytest.mark.parametrize("k", [4, 16, 64])
def test_distortion_never_increases(rng, k):
    book = kmeans_fit(rng.normal(size=(1000, 8)), k, seed=1)
    h = book.history
    assert all(b <= a for a, b in zip(h, h[1:]))


def test_repeated_fit_is_bit_identical(rng):
    x = rng.normal(size=(300, 6))
    a, b = kmeans_fit(x, 8, seed=5), kmeans_fit(x, 8, seed=5)
    assert a.centroids.tobytes() == b.centroids.tobytes()
    assert a.content_hash == b.content_hash


def test_k_above_distinct_warns(rng, caplog):
    x = np.repeat(rng.normal(size=(3, 2)), 4, axis=0)
    with caplog.at_level(logging.WARNING):
        book = kmeans_fit(x, 5)
    assert "distinct" in caplog.text
    assert np.all(np.isfinite(book.centroids))


def test_centroids_distinct_after_fit(rng):
    book = kmeans_fit(rng.normal(size=(200, 3)), 32, seed=2)
    assert np.unique(book.centroids, axis=0).shape[0] == 32


def test_accepts_sequences(rng):
    seqs = [rng.normal(size=(4, 10)), E.Tensor(rng.normal(size=(4, 7)))]
    assert kmeans_fit(seqs, 3).dims == 4


# assignment -----------------------------------------------------------------

def test_exact_centroid_and_ties():
    cents = np.array([[9.0, 9.0], [5.0, 5.0], [1.0, 0.0], [7.0, 7.0], [8.0, 8.0], [-1.0, 0.0]])
    book = _book(cents)
    assert tokenize(np.array([[5.0], [5.0]]), book).tolist() == [1]
    # the origin sits exactly between centroids 2 and 5
    assert tokenize(np.zeros((2, 1)), book).tolist() == [2]


def test_matches_bruteforce(rng):
    cents = rng.normal(size=(37, 5))
    q = rng.normal(size=(2000, 5))
    ids, _ = nearest(q, cents)
    brute = np.array([np.argmin([np.sum((p - c) ** 2) for c in cents]) for p in q[:300]])
    assert np.array_equal(ids[:300], brute)
    full = np.argmin(((q[:, None, :] - cents[None]) ** 2).sum(-1), axis=1)
    assert np.array_equal(ids, full)


def test_dim_mismatch(rng):
    with pytest.raises(CodebookError, match="dims"):
        tokenize(rng.normal(size=(3, 5)), _book(rng.normal(size=(4, 2))))


@given(seed=st.integers(0, 10_000), k=st.integers(1, 20), n=st.integers(1, 30))
@settings(max_examples=40, deadline=None)
def test_detokenize_roundtrip(seed, k, n):
    rng = np.random.default_rng(seed)
    book = _book(rng.normal(size=(k, 3)) * np.arange(1, k + 1)[:, None])
    if np.unique(book.centroids, axis=0).shape[0] < k:
        return
    ids = rng.integers(0, k, size=n)
    assert np.array_equal(tokenize(detokenize(ids, book), book), ids)


def test_detokenize_constant_and_errors(rng):
    book = _book(rng.normal(size=(4, 3)))
    out = detokenize(np.full(6, 2), book)
    assert out.shape == (3, 6) and np.all(out == book.centroids[2][:, None])
    with pytest.raises(CodebookError, match="position 1"):
        detokenize([0, 7], book)


# multi-resolution streams ---------------------------------------------------

@given(frames=st.integers(1, 500))
@settings(max_examples=100, deadline=None)
def test_stream_length_law(frames):
    ladder = ResolutionLadder((20, 40, 80, 240))
    assert stream_lengths(frames, ladder) == [frames, math.ceil(frames / 2),
                                              math.ceil(frames / 4), math.ceil(frames / 12)]


def test_token_arithmetic():
    lens = stream_lengths(200, ResolutionLadder((20, 40, 80)))
    assert lens == [200, 100, 50] and sum(lens) == 350
    same = 3 * stream_lengths(200, ResolutionLadder((20,)))[0]
    assert same == 600
    assert round(same / sum(lens), 3) == 1.714


def _mrf(rng, ladder, frames, width=4):
    store = E.ParamStore()
    r = Resampler(store, width, width, ResolutionLadder(ladder), rng=rng, dtype=np.float64)
    return r(rng.normal(size=(width, frames)))


def test_tokenize_multi(rng, tmp_path):
    mrf = _mrf(rng, (20, 40, 80), 200)
    books = [kmeans_fit([x.data], 8, seed=i, resolution_ms=r)
             for i, (x, r) in enumerate(zip(mrf.up_path, (20, 40, 80)))]
    toks = tokenize_multi(mrf, books, utt_id="u1")
    assert [len(s) for s in toks.streams] == [200, 100, 50] and toks.total_tokens == 350
    assert toks.codebooks == [b.content_hash for b in books]
    toks.save(tmp_path / "u1.json")
    obj = json.loads((tmp_path / "u1.json").read_text())
    assert set(obj) == {"ladder_ms", "streams", "codebooks", "utt_id"}
    back = TokenStreams.load(tmp_path / "u1.json")
    assert all(np.array_equal(a, b) for a, b in zip(back.streams, toks.streams))
    with pytest.raises(CodebookError, match="missing"):
        tokenize_multi(mrf, books[:2])


def test_single_level_stream(rng):
    mrf = _mrf(rng, (20,), 33)
    toks = tokenize_multi(mrf, [kmeans_fit([mrf.up_path[0].data], 4)])
    assert [len(s) for s in toks.streams] == [33]


def test_codebook_file_roundtrip(tmp_path, rng):
    book = kmeans_fit(rng.normal(size=(100, 3)), 5, resolution_ms=40.0)
    path = tmp_path / "b.cdbk"
    save_codebook(path, book)
    back = load_codebook(path)
    assert back.centroids.tobytes() == book.centroids.tobytes()
    assert back.resolution_ms == 40.0 and back.content_hash == book.content_hash
    raw = bytearray(path.read_bytes())
    raw[30] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CodebookError, match="CRC"):
        load_codebook(path)
    path.write_bytes(b"SOMDFEAT" + bytes(raw[8:]))
    with pytest.raises(CodebookError, match="magic"):
        load_codebook(path)
