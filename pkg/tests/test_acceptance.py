"""End-to-end acceptance checks, one test per criterion.

Each test tags itself with ``criterion`` (and optionally ``detail``); the
conftest hook prints one PASS/FAIL line per criterion after the run.
Run alone with ``pytest tests/test_acceptance.py -v``.
"""
import json
import math
import time

import numpy as np
import pytest

from conftest import store_grad_error
from mrunits import engine as E
from mrunits import pipeline as P
from mrunits.audio import WaveBuffer, read_wav, write_wav
from mrunits.config import desk_config
from mrunits.metrics import F0Track, evaluate_pair_set, extract_f0, f0_metrics, mcd
from mrunits.quantizer import kmeans_fit, nearest, stream_lengths
from mrunits.resampler import ResolutionLadder, Resampler
from mrunits.train import generator_config
from mrunits.vocoder import Generator


def _resampler(rng, ladder=(20, 40, 80), dim=4):
    store = E.ParamStore()
    return store, Resampler(store, dim, dim, ResolutionLadder(ladder), rng=rng,
                            dtype=np.float64)


def test_gradient_suite(record_property):
    record_property("criterion", "gradient suite (conv, resampler, desk generator)")
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    errors = {}

    x, w, b = rng.normal(size=(3, 12)), rng.normal(size=(2, 3, 3)), rng.normal(size=2)
    tgt = rng.normal(size=(2, E.conv_out_frames(12, 3, 2, 1, 2)))
    errors["conv1d"] = E.grad_check(
        lambda t: (E.conv1d(t["x"], t["w"], t["b"], 2, 1, 2) ** 2 * tgt).sum(),
        {"x": x, "w": w, "b": b})

    x, w = rng.normal(size=(3, 7)), rng.normal(size=(3, 2, 4))
    tgt = rng.normal(size=(2, E.conv_transpose_out_frames(7, 4, 2, 1, 1)))
    errors["conv_transpose1d"] = E.grad_check(
        lambda t: (E.conv_transpose1d(t["x"], t["w"], t["b"], 2, 1, 1) ** 2 * tgt).sum(),
        {"x": x, "w": w, "b": b})

    store, r = _resampler(rng)
    tgt = rng.normal(size=(4, 9))
    errors["transfer"] = store_grad_error(
        store, lambda v: (r.transfer_encode(v["s"]) * tgt).sum(),
        names=["transfer.weight", "transfer.bias"], extra={"s": rng.normal(size=(4, 9))})

    targets = [rng.normal(size=(4, n)) for n in (11, 6, 3)]

    def resampler_loss(v):
        levels = r(v["s"]).up_path
        total = (levels[0] * levels[0] * targets[0]).sum()
        for level, t in zip(levels[1:], targets[1:]):
            total = total + (level * level * t).sum()
        return total

    errors["resampler"] = store_grad_error(store, resampler_loss,
                                           extra={"s": rng.normal(size=(4, 11))})

    cfg = desk_config()
    gstore = E.ParamStore()
    gen = Generator(gstore, generator_config(cfg, cfg.width), rng=rng, dtype=np.float64)
    gtgt = rng.normal(size=(1, 2 * cfg.hop))
    errors["generator"] = store_grad_error(
        gstore, lambda v: (gen(v["f"]) * gtgt).sum(),
        extra={"f": rng.normal(size=(cfg.width, 2))}, max_entries=8)

    elapsed = time.perf_counter() - t0
    record_property("detail", ", ".join(f"{k} {v:.1e}" for k, v in errors.items())
                    + f", {elapsed:.1f} s")
    assert all(v < 1e-6 for k, v in errors.items() if k != "generator")
    assert errors["generator"] < 1e-5
    assert elapsed < 60


def test_adjoint_identity(record_property):
    record_property("criterion", "conv / transposed-conv adjoint identity")
    rng = np.random.default_rng(1)
    worst = 0.0
    draws = 0
    while draws < 150:
        cin, cout, k = rng.integers(1, 5, size=3)
        stride, pad = int(rng.integers(1, 4)), int(rng.integers(0, 3))
        frames = int(rng.integers(1, 30))
        if frames + 2 * pad < k:
            continue
        x = rng.normal(size=(cin, frames))
        w = rng.normal(size=(cout, cin, k))
        n = E.conv_out_frames(frames, k, stride, pad)
        y = rng.normal(size=(cout, n))
        fwd = E.conv1d(E.Tensor(x), E.Tensor(w), stride=stride, padding=pad).data
        opad = frames - E.conv_transpose_out_frames(n, k, stride, pad)
        adj = E.conv_transpose1d(E.Tensor(y), E.Tensor(w), stride=stride, padding=pad,
                                 output_padding=opad).data
        lhs, rhs = np.sum(fwd * y), np.sum(x * adj)
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1.0))
        draws += 1
    record_property("detail", f"{draws} draws, worst {worst:.1e}")
    assert worst <= 1e-10


def test_resampler_length_law(record_property):
    record_property("criterion", "resampler length law and residual weight")
    rng = np.random.default_rng(2)
    store, r = _resampler(rng, dim=2)
    for frames in range(1, 65):
        mrf = r(np.ones((2, frames)))
        expect = [frames, math.ceil(frames / 2), math.ceil(frames / 4)]
        assert [x.shape[1] for x in mrf.down_path] == expect
        assert [x.shape[1] for x in mrf.up_path] == expect
    for n in store.names("up."):
        store[n].data[:] = 0
    finest = r.forward(np.ones((2, 8))).up_path[0].data
    record_property("detail", f"finest level {finest[0, 0]:.6f}")
    assert np.all(np.abs(finest - 0.632456) < 1e-6)


def test_token_arithmetic(record_property):
    record_property("criterion", "token arithmetic")
    frames = int(4.0 * 1000 / 20)
    lens = stream_lengths(frames, ResolutionLadder((20, 40, 80)))
    same = 3 * stream_lengths(frames, ResolutionLadder((20,)))[0]
    record_property("detail", f"{lens} total {sum(lens)}, flat {same}, ratio {same / sum(lens):.3f}")
    assert lens == [200, 100, 50] and sum(lens) == 350
    assert same == 600
    assert round(same / sum(lens), 3) == 1.714


def test_kmeans(record_property):
    record_property("criterion", "k-means monotone, exact and brute-force")
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    frames = rng.normal(size=(1000, 16))
    for k in (4, 64):
        h = kmeans_fit(frames, k, seed=k).history
        assert all(b <= a for a, b in zip(h, h[1:])), f"k={k}: {h}"
    pts = rng.normal(size=(20, 5))
    assert kmeans_fit(pts, 20, seed=0).distortion == 0.0
    cents = rng.normal(size=(64, 16))
    queries = rng.normal(size=(10_000, 16))
    ids, _ = nearest(queries, cents)
    brute = np.array([np.argmin(((cents - q) ** 2).sum(axis=1)) for q in queries])
    elapsed = time.perf_counter() - t0
    record_property("detail", f"{elapsed:.1f} s")
    assert np.array_equal(ids, brute)
    assert elapsed < 30


@pytest.fixture(scope="module")
def desk_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk_corpus")
    P.cmd_gen_synthetic_data(root, n_train=5, seed=0, duration_s=2.0, sample_rate=8000)
    return P.Manifest.load(root / "manifest.jsonl")


def test_overfit_trend(desk_corpus, tmp_path, record_property):
    record_property("criterion", "overfit trend (desk config, 5 clips, 2000 steps)")
    cfg = desk_config()
    t0 = time.perf_counter()
    P.cmd_extract(desk_corpus, cfg, tmp_path)
    res = P.cmd_train_resyn(desk_corpus, cfg, tmp_path)
    P.cmd_fit_codebooks(desk_corpus, cfg, tmp_path)
    P.cmd_tokenize(desk_corpus, cfg, tmp_path)
    P.cmd_train_unit_vocoder(desk_corpus, cfg, tmp_path)
    P.cmd_resynth(desk_corpus, cfg, tmp_path)
    report = P.cmd_evaluate(desk_corpus, cfg, tmp_path)
    elapsed = time.perf_counter() - t0

    ratio = res.eval_mel_final / res.eval_mel_initial
    silent = {}
    for e in desk_corpus.split("train"):
        ref = read_wav(e.wav_path)
        silent[e.utt_id] = mcd(ref, WaveBuffer(np.zeros_like(ref.samples), ref.sample_rate),
                               frame_ms=cfg.eval_frame_ms)
    margins = [silent[row.utt_id] - row.mcd for row in report.rows]
    record_property("detail", f"mel {res.eval_mel_initial:.3f} -> {res.eval_mel_final:.3f} "
                              f"(ratio {ratio:.3f}), min MCD margin vs silence "
                              f"{min(margins):.2f} dB, {elapsed / 60:.1f} min")
    assert len(report.rows) == 5
    assert ratio <= 0.20
    assert all(m > 0 for m in margins)
    assert elapsed < 15 * 60


def test_metric_oracles(tmp_path, record_property):
    record_property("criterion", "metric oracles")
    sr = 16000
    t = np.arange(sr) / sr
    tone = WaveBuffer(0.3 * sum(np.sin(2 * np.pi * h * 220 * t) / h for h in range(1, 6)), sr)
    path = tmp_path / "ref.wav"
    write_wav(path, tone)
    rep = evaluate_pair_set([("u", path, path)])
    assert (rep.mcd_db, rep.f0_rmse, rep.semitone_acc, rep.vuv_error) == (0.0, 0.0, 1.0, 0.0)

    ref = F0Track(np.linspace(100.0, 600.0, 80))
    rmse, acc, _ = f0_metrics(ref, F0Track(ref.f0_hz * 2 ** (1 / 12)))
    assert abs(rmse - math.log(2) / 12) <= 1e-4 and acc == 0.0

    track = extract_f0(WaveBuffer(0.5 * np.sin(2 * np.pi * 440 * t), sr))
    voiced = track.f0_hz[track.voiced]
    hit = float(np.mean(np.abs(voiced - 440.0) <= 2.0)) if len(voiced) else 0.0
    record_property("detail", f"semitone rmse {rmse:.6f}, 440 Hz hit rate {hit:.3f}")
    assert hit >= 0.95


QUICK = dict(resyn_steps=30, unit_steps=20, checkpoint_interval=10)


def test_determinism(desk_corpus, tmp_path, record_property):
    record_property("criterion", "determinism of tokens and codebooks")
    cfg = desk_config(**QUICK)
    for run in ("a", "b"):
        P.cmd_end_to_end(desk_corpus, cfg, tmp_path / run)
    a = tmp_path / "a"
    tokens = [p for p in a.glob("tokens/*.json") if p.name != "stage.json"]
    files = sorted(p.relative_to(a) for p in [*tokens, *a.glob("codebooks/*.somdcdbk")])
    record_property("detail", f"{len(files)} files compared")
    assert len(files) == 5 + len(cfg.ladder)
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel


def test_ablation_report(desk_corpus, tmp_path, record_property):
    record_property("criterion", "ablation report over (20), (20,40), (20,40,80)")
    cfg = desk_config(**QUICK)
    ladders = [ResolutionLadder(x) for x in ((20,), (20, 40), (20, 40, 80))]
    rows, table = P.cmd_ablate(desk_corpus, ladders, cfg, tmp_path)
    rates = [r[2]["tokens/s"] if r[2] else None for r in rows]
    record_property("detail", f"tokens/s {rates}")
    assert rates == [50.0, 75.0, 87.5]
    assert [r[2]["tokens"] for r in rows] == [5 * 100, 5 * 150, 5 * 175]
    lines = table.splitlines()
    assert [c.strip() for c in lines[0].split(" | ")][:6] == \
        ["Method", "Resolution", "MCD", "F0 RMSE", "S. ACC.", "VUV Error"]
    assert len(lines) == 2 + 3 and "absent" not in table
    assert json.loads((tmp_path / "ablation.json").read_text())[2]["ladder_ms"] == [20, 40, 80]
