"""Objective resynthesis metrics: MCD, log-F0 RMSE, semitone accuracy, V/UV error."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.fft import dct

from .audio import MelAnalysis, WaveBuffer, log_mel, read_wav

log = logging.getLogger(__name__)

MCD_CONST = 10.0 * math.sqrt(2.0) / math.log(10.0)
MCD_ORDER = 13
F0_RANGE = (50.0, 1100.0)
CLARITY_THRESHOLD = 0.45
SILENCE_DBFS = -60.0


@dataclass
class F0Track:
    f0_hz: np.ndarray

    def __post_init__(self):
        self.f0_hz = np.asarray(self.f0_hz, dtype=np.float64)

    @property
    def voiced(self):
        return self.f0_hz > 0

    @property
    def frames(self):
        return len(self.f0_hz)


def extract_f0(wave: WaveBuffer, frame_ms=10.0, range_hz=F0_RANGE,
               clarity=CLARITY_THRESHOLD, floor_dbfs=SILENCE_DBFS):
    """Normalised-autocorrelation pitch track, one value per ``frame_ms`` hop.

    A frame is voiced when its RMS exceeds ``floor_dbfs`` and the best
    correlation peak exceeds ``clarity``. Among peaks within 10% of the
    best, the shortest lag wins, which suppresses sub-octave picks.
    """
    x = np.asarray(wave.samples, dtype=np.float64)
    sr = wave.sample_rate
    hop = max(1, int(round(sr * frame_ms / 1000.0)))
    fmin, fmax = range_hz
    min_lag = max(2, int(math.floor(sr / fmax)))
    max_lag = int(math.ceil(sr / fmin))
    win = max_lag
    n_frames = len(x) // hop
    f0 = np.zeros(n_frames)
    if n_frames == 0:
        return F0Track(f0)
    padded = np.concatenate([x, np.zeros(win + max_lag + 2)])
    floor = 10.0 ** (floor_dbfs / 20.0)
    lags = np.arange(min_lag - 1, max_lag + 2)
    for t in range(n_frames):
        start = t * hop + hop // 2 - win // 2
        if start < 0:
            start = 0
        seg = padded[start:start + win + max_lag + 2]
        ref = seg[:win]
        e0 = float(ref @ ref)
        if math.sqrt(e0 / win) < floor:
            continue
        shifted = np.lib.stride_tricks.sliding_window_view(seg, win)[lags]
        cross = shifted @ ref
        energy = np.einsum("ij,ij->i", shifted, shifted)
        r = cross / np.sqrt(e0 * np.maximum(energy, 1e-20))
        inner = r[1:-1]
        peaks = np.flatnonzero((inner >= r[:-2]) & (inner > r[2:])) + 1
        if peaks.size == 0:
            continue
        best = float(r[peaks].max())
        if best < clarity:
            continue
        i = int(peaks[np.flatnonzero(r[peaks] >= 0.9 * best)[0]])
        a, b, c = r[i - 1], r[i], r[i + 1]
        denom = a - 2.0 * b + c
        shift = 0.5 * (a - c) / denom if denom < 0 else 0.0
        lag = lags[i] + shift
        f0[t] = float(np.clip(sr / lag, fmin, fmax))
    return F0Track(f0)


def mel_cepstrum(samples, sample_rate, frame_ms=10.0, n_mels=80, n_fft=1024,
                 order=MCD_ORDER):
    """Coefficients ``1..order`` of the DCT-II of the log-mel spectrum, ``(T, order)``."""
    analysis = MelAnalysis(sample_rate, frame_ms, n_fft, n_mels)
    lm = log_mel(samples, analysis)
    return dct(lm, type=2, norm="ortho", axis=0)[1:order + 1].T


def mcd_from_cepstra(c_ref, c_syn):
    """Frame-synchronous MCD in dB between ``(T, order)`` cepstra."""
    n = min(len(c_ref), len(c_syn))
    if n == 0:
        raise ValueError("no overlapping frames")
    diff = np.asarray(c_ref[:n]) - np.asarray(c_syn[:n])
    return float(MCD_CONST * np.mean(np.sqrt(np.sum(diff * diff, axis=1))))


def mcd(ref: WaveBuffer, syn: WaveBuffer, frame_ms=10.0, n_mels=80, n_fft=1024):
    if ref.sample_rate != syn.sample_rate:
        raise ValueError("sample rates differ")
    n = min(len(ref.samples), len(syn.samples))
    hop = int(round(ref.sample_rate * frame_ms / 1000.0))
    if n < max(hop, 2):
        raise ValueError("reference and synthesis do not overlap by a full frame")
    c_ref = mel_cepstrum(ref.samples[:n], ref.sample_rate, frame_ms, n_mels, n_fft)
    c_syn = mel_cepstrum(syn.samples[:n], syn.sample_rate, frame_ms, n_mels, n_fft)
    return mcd_from_cepstra(c_ref, c_syn)


def f0_metrics(ref: F0Track, syn: F0Track):
    """``(f0_rmse, semitone_acc, vuv_error)``; the first two are ``None``
    when no frame is voiced in both tracks."""
    n = min(ref.frames, syn.frames)
    fr = ref.f0_hz[:n]
    fs = syn.f0_hz[:n]
    vr = fr > 0
    vs = fs > 0
    vuv = float(np.mean(vr != vs)) if n else 0.0
    both = vr & vs
    if not both.any():
        return None, None, vuv
    lr = np.log(fr[both])
    ls = np.log(fs[both])
    rmse = float(np.sqrt(np.mean((ls - lr) ** 2)))
    semis = np.round(12.0 * (ls - lr) / math.log(2.0))
    acc = float(np.mean(semis == 0))
    return rmse, acc, vuv


@dataclass
class UttScores:
    utt_id: str
    mcd: float
    f0_rmse: float | None
    semitone_acc: float | None
    vuv_error: float


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    def _mean(self, attr):
        vals = [getattr(r, attr) for r in self.rows if getattr(r, attr) is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def mcd_db(self):
        return self._mean("mcd")

    @property
    def f0_rmse(self):
        return self._mean("f0_rmse")

    @property
    def semitone_acc(self):
        return self._mean("semitone_acc")

    @property
    def vuv_error(self):
        return self._mean("vuv_error")

    def summary(self):
        return {"mcd": self.mcd_db, "f0_rmse": self.f0_rmse,
                "semitone_acc": self.semitone_acc, "vuv_error": self.vuv_error,
                "n_utts": len(self.rows), "n_skipped": len(self.skipped)}

    def write_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["utt_id", "mcd", "f0_rmse", "semitone_acc", "vuv_error"])
            for r in self.rows:
                w.writerow([r.utt_id, _fmt(r.mcd), _fmt(r.f0_rmse),
                            _fmt(r.semitone_acc), _fmt(r.vuv_error)])
            w.writerow(["MEAN", _fmt(self.mcd_db), _fmt(self.f0_rmse),
                        _fmt(self.semitone_acc), _fmt(self.vuv_error)])

    def table(self, label="resynthesis", resolution=""):
        return format_table([(label, resolution, self.summary())])


def _fmt(v, spec=".6f"):
    return "" if v is None else format(v, spec)


def format_table(rows, extra_columns=()):
    """Plain-text table with the resynthesis metric columns.

    ``rows`` holds ``(method, resolution, summary_dict)``; ``extra_columns``
    names additional summary keys to append.
    """
    header = ["Method", "Resolution", "MCD", "F0 RMSE", "S. ACC.", "VUV Error", *extra_columns]
    body = []
    for method, res, s in rows:
        if s is None:
            body.append([method, res, "absent", "", "", "", *["" for _ in extra_columns]])
            continue
        cells = [
            method, res, _fmt(s.get("mcd"), ".4f"), _fmt(s.get("f0_rmse"), ".4f"),
            "" if s.get("semitone_acc") is None else f"{100 * s['semitone_acc']:.2f}%",
            "" if s.get("vuv_error") is None else f"{100 * s['vuv_error']:.2f}%",
        ]
        for col in extra_columns:
            v = s.get(col)
            cells.append("" if v is None else (f"{v:g}" if isinstance(v, float) else str(v)))
        body.append(cells)
    widths = [max(len(str(c)) for c in col) for col in zip(header, *body)]
    line = lambda cells: " | ".join(str(c).ljust(w) for c, w in zip(cells, widths))
    out = [line(header), "-+-".join("-" * w for w in widths)]
    out += [line(b) for b in body]
    return "\n".join(out)


def score_pair(utt_id, ref: WaveBuffer, syn: WaveBuffer, frame_ms=10.0):
    m = mcd(ref, syn, frame_ms)
    rmse, acc, vuv = f0_metrics(extract_f0(ref, frame_ms), extract_f0(syn, frame_ms))
    return UttScores(utt_id, m, rmse, acc, vuv)


def evaluate_pair_set(pairs, sample_rate=None, frame_ms=10.0):
    """Score ``(utt_id, ref_path, syn_path)`` triples in order.

    Unreadable files are skipped with a warning and listed in
    ``report.skipped``; corpus values are unweighted means.
    """
    report = EvalReport()
    for utt_id, ref_path, syn_path in pairs:
        try:
            ref = read_wav(ref_path, sample_rate)
            syn = read_wav(syn_path, ref.sample_rate)
        except (OSError, ValueError, EOFError) as exc:
            log.warning("skipping %s: %s", utt_id, exc)
            report.skipped.append(utt_id)
            continue
        report.rows.append(score_pair(utt_id, ref, syn, frame_ms))
    return report
