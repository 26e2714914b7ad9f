"""Stage runner: extract -> train-resyn -> fit-codebooks -> tokenize ->
train-unit-vocoder -> resynth -> evaluate, plus the resolution ablation.

Every stage writes ``<out>/<stage>/stage.json`` recording the hashes of its
outputs, of the upstream stamps it consumed and of the resolved config.
Downstream stages re-verify that chain and refuse stale inputs.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import engine as E
from .audio import WaveBuffer, read_wav, write_wav
from .config import RunConfig
from .features import extract_pseudo_ssl, load_feature_dump, save_feature_dump
from .metrics import EvalReport, evaluate_pair_set, format_table
from .quantizer import (TokenStreams, kmeans_fit, load_codebook, save_codebook,
                        tokenize_multi)
from .resampler import ResolutionLadder
from .synth import synth_corpus
from .train import ResynthesisModel, UnitVocoderModel, load_generator_state, train

log = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")
STAGES = ("features", "resyn", "codebooks", "tokens", "unit", "wavs", "eval")
UPSTREAM = {
    "features": (),
    "resyn": ("features",),
    "codebooks": ("resyn",),
    "tokens": ("codebooks",),
    "unit": ("tokens",),
    "wavs": ("unit",),
    "eval": ("wavs",),
}


class DataError(RuntimeError):
    """Unreadable or inconsistent input data."""


class StaleArtifactError(DataError):
    """An upstream artifact changed after a downstream stage consumed it."""


# manifests -----------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    utt_id: str
    wav_path: Path
    split: str
    feat_path: Path | None = None


class Manifest:
    """JSON Lines: ``{"utt_id", "wav_path", "split"[, "feat_path"]}`` per line.

    Relative paths resolve against the manifest's directory.
    """

    def __init__(self, entries):
        self.entries = list(entries)
        seen = set()
        for e in self.entries:
            if e.utt_id in seen:
                raise DataError(f"duplicate utt_id {e.utt_id!r}")
            if e.split not in SPLITS:
                raise DataError(f"{e.utt_id}: unknown split {e.split!r}")
            seen.add(e.utt_id)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def split(self, name):
        return [e for e in self.entries if e.split == name]

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            lines = path.read_text().splitlines()
        except OSError as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc
        entries = []
        for n, line in enumerate(lines, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                wav = Path(obj["wav_path"])
                feat = Path(obj["feat_path"]) if obj.get("feat_path") else None
                entries.append(ManifestEntry(
                    str(obj["utt_id"]),
                    wav if wav.is_absolute() else path.parent / wav,
                    obj.get("split", "train"),
                    None if feat is None else (feat if feat.is_absolute() else path.parent / feat),
                ))
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise DataError(f"{path}:{n}: bad manifest line ({exc})") from exc
        return cls(entries)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            for e in self.entries:
                obj = {"utt_id": e.utt_id, "wav_path": _rel(e.wav_path, path.parent),
                       "split": e.split}
                if e.feat_path is not None:
                    obj["feat_path"] = _rel(e.feat_path, path.parent)
                fh.write(json.dumps(obj) + "\n")


def _rel(p, base):
    try:
        return str(Path(p).resolve().relative_to(Path(base).resolve()))
    except ValueError:
        return str(p)


# hashing and stage stamps ----------------------------------------------------

def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(cfg: RunConfig):
    return hashlib.sha256(cfg.to_json().encode()).hexdigest()


def _stamp_path(out, stage):
    return Path(out) / stage / "stage.json"


def _write_stamp(out, stage, cfg, outputs):
    out = Path(out)
    inputs = {up: sha256_file(_stamp_path(out, up)) for up in UPSTREAM[stage]}
    stamp = {
        "stage": stage,
        "config": config_hash(cfg),
        "inputs": inputs,
        "outputs": {str(Path(p).relative_to(out)): sha256_file(p) for p in sorted(outputs)},
    }
    _archive_config(out, cfg)
    path = _stamp_path(out, stage)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(stamp, indent=1, sort_keys=True) + "\n")


def verify_stage(out, stage, cfg):
    """Raise :class:`StaleArtifactError` unless ``stage`` and its ancestry
    are present and unchanged."""
    out = Path(out)
    path = _stamp_path(out, stage)
    if not path.exists():
        raise StaleArtifactError(f"stage {stage!r} has not been run in {out}")
    stamp = json.loads(path.read_text())
    if stamp["config"] != config_hash(cfg):
        raise StaleArtifactError(f"stage {stage!r} was produced under a different config")
    for rel, digest in stamp["outputs"].items():
        p = out / rel
        if not p.exists() or sha256_file(p) != digest:
            raise StaleArtifactError(f"stage {stage!r}: output {rel} is missing or modified")
    for up, digest in stamp["inputs"].items():
        up_path = _stamp_path(out, up)
        if not up_path.exists() or sha256_file(up_path) != digest:
            raise StaleArtifactError(
                f"stage {stage!r} consumed a different {up!r} than the one on disk")
        verify_stage(out, up, cfg)


def _archive_config(out, cfg):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")


# stages --------------------------------------------------------------------

def _feature_key(cfg):
    fields = ("sample_rate", "frame_ms", "n_fft", "n_mels", "ssl_layers", "feature_source")
    return hashlib.sha256(json.dumps({f: getattr(cfg, f) for f in fields},
                                     sort_keys=True).encode()).hexdigest()


def _feat_path(out, utt_id):
    return Path(out) / "features" / f"{utt_id}.somdfeat"


def cmd_extract(manifest: Manifest, cfg: RunConfig, out):
    """One SOMDFEAT dump per utterance; unchanged inputs are not rewritten.

    Returns ``{"written": [...], "skipped": [...], "failed": [...]}`` and
    raises :class:`DataError` after processing if any utterance failed.
    """
    out = Path(out)
    _archive_config(out, cfg)
    index_path = out / "features" / "index.json"
    index = json.loads(index_path.read_text()) if index_path.exists() else {}
    key = _feature_key(cfg)
    result = {"written": [], "skipped": [], "failed": []}
    for e in manifest:
        dst = _feat_path(out, e.utt_id)
        src = e.feat_path if cfg.feature_source == "dump" else e.wav_path
        try:
            src_hash = sha256_file(src)
        except (OSError, TypeError) as exc:
            log.error("%s: cannot read %s (%s)", e.utt_id, src, exc)
            result["failed"].append(e.utt_id)
            continue
        prev = index.get(e.utt_id)
        if (prev and prev["source_sha"] == src_hash and prev["key"] == key
                and dst.exists() and sha256_file(dst) == prev["sha"]):
            result["skipped"].append(e.utt_id)
            continue
        try:
            if cfg.feature_source == "dump":
                stack = load_feature_dump(src)
            else:
                stack = extract_pseudo_ssl(read_wav(src, cfg.sample_rate), cfg.ssl_layers,
                                           cfg.n_mels, cfg.frame_ms, cfg.n_fft)
        except (OSError, ValueError, EOFError) as exc:
            log.error("%s: extraction failed (%s)", e.utt_id, exc)
            result["failed"].append(e.utt_id)
            continue
        save_feature_dump(dst, stack)
        index[e.utt_id] = {"source_sha": src_hash, "key": key, "sha": sha256_file(dst)}
        result["written"].append(e.utt_id)
    index_path.parent.mkdir(parents=True, exist_ok=True)
    index_path.write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")
    if result["failed"]:
        raise DataError(f"feature extraction failed for: {', '.join(result['failed'])}")
    _write_stamp(out, "features", cfg,
                 [_feat_path(out, e.utt_id) for e in manifest] + [index_path])
    return result


def _load_items(manifest, cfg, out, split):
    items = []
    for e in manifest.split(split):
        stack = load_feature_dump(_feat_path(out, e.utt_id))
        wave = read_wav(e.wav_path, cfg.sample_rate).samples
        items.append({"utt_id": e.utt_id, "input": stack, "wave": wave})
    return items


def _resyn_model(cfg, stack):
    return ResynthesisModel(cfg, in_dim=stack.dims, layers=stack.layers)


def load_resyn_model(manifest, cfg, out):
    first = load_feature_dump(_feat_path(out, manifest.entries[0].utt_id))
    model = _resyn_model(cfg, first)
    model.store.load_state(E.load_checkpoint(Path(out) / "resyn" / "model.ckpt"))
    return model


def cmd_train_resyn(manifest, cfg, out, progress=None):
    out = Path(out)
    verify_stage(out, "features", cfg)
    items = _load_items(manifest, cfg, out, "train")
    if not items:
        raise DataError("no training utterances in manifest")
    model = _resyn_model(cfg, items[0]["input"])
    result = train(model, items, cfg, cfg.resyn_steps, out_dir=out / "resyn", progress=progress)
    _write_stamp(out, "resyn", cfg, [out / "resyn" / "model.ckpt", out / "resyn" / "loss.csv"])
    return result


def _codebook_path(out, level, res):
    return Path(out) / "codebooks" / f"level{level}_{res:g}ms.somdcdbk"


def cmd_fit_codebooks(manifest, cfg, out):
    out = Path(out)
    verify_stage(out, "resyn", cfg)
    model = load_resyn_model(manifest, cfg, out)
    ladder = cfg.resolution_ladder
    per_level = [[] for _ in ladder.resolutions_ms]
    with E.no_grad():
        for e in manifest.split("train"):
            mrf = model.multires(load_feature_dump(_feat_path(out, e.utt_id)))
            for level, x in enumerate(mrf.up_path):
                per_level[level].append(x.data)
    if not per_level[0]:
        raise DataError("no training utterances to fit codebooks on")
    books = []
    for level, res in enumerate(ladder.resolutions_ms):
        book = kmeans_fit(per_level[level], cfg.k, seed=cfg.seed + level,
                          max_iters=cfg.kmeans_max_iters, tol=cfg.kmeans_tol,
                          resolution_ms=res)
        save_codebook(_codebook_path(out, level, res), book)
        log.info("level %d (%g ms): distortion %.6g after %d iterations",
                 level, res, book.distortion, len(book.history))
        books.append(book)
    _write_stamp(out, "codebooks", cfg,
                 [_codebook_path(out, i, r) for i, r in enumerate(ladder.resolutions_ms)])
    return books


def load_codebooks(cfg, out):
    ladder = cfg.resolution_ladder
    return [load_codebook(_codebook_path(out, i, r))
            for i, r in enumerate(ladder.resolutions_ms)]


def _token_path(out, utt_id):
    return Path(out) / "tokens" / f"{utt_id}.json"


def cmd_tokenize(manifest, cfg, out):
    out = Path(out)
    verify_stage(out, "codebooks", cfg)
    model = load_resyn_model(manifest, cfg, out)
    books = load_codebooks(cfg, out)
    paths = []
    with E.no_grad():
        for e in manifest:
            mrf = model.multires(load_feature_dump(_feat_path(out, e.utt_id)))
            streams = tokenize_multi(mrf, books, utt_id=e.utt_id)
            streams.save(_token_path(out, e.utt_id))
            paths.append(_token_path(out, e.utt_id))
    _write_stamp(out, "tokens", cfg, paths)
    return paths


def _load_tokens(out, utt_id, books):
    tokens = TokenStreams.load(_token_path(out, utt_id))
    expected = [b.content_hash for b in books]
    if list(tokens.codebooks) != expected:
        raise StaleArtifactError(f"{utt_id}: tokens were produced with different codebooks")
    return tokens


def _unit_model(cfg, books):
    return UnitVocoderModel(cfg, [b.k for b in books])


def cmd_train_unit_vocoder(manifest, cfg, out, progress=None):
    out = Path(out)
    verify_stage(out, "tokens", cfg)
    books = load_codebooks(cfg, out)
    items = [{"utt_id": e.utt_id, "input": _load_tokens(out, e.utt_id, books),
              "wave": read_wav(e.wav_path, cfg.sample_rate).samples}
             for e in manifest.split("train")]
    if not items:
        raise DataError("no training utterances in manifest")
    model = _unit_model(cfg, books)
    if cfg.unit_init_from_resyn:
        load_generator_state(model, E.load_checkpoint(out / "resyn" / "model.ckpt"))
    result = train(model, items, cfg, cfg.unit_steps, out_dir=out / "unit", progress=progress)
    _write_stamp(out, "unit", cfg, [out / "unit" / "model.ckpt", out / "unit" / "loss.csv"])
    return result


def _wav_path(out, utt_id):
    return Path(out) / "wavs" / f"{utt_id}.wav"


def cmd_resynth(manifest, cfg, out):
    out = Path(out)
    verify_stage(out, "unit", cfg)
    books = load_codebooks(cfg, out)
    model = _unit_model(cfg, books)
    model.store.load_state(E.load_checkpoint(out / "unit" / "model.ckpt"))
    paths = []
    with E.no_grad():
        for e in manifest.split(cfg.eval_split):
            tokens = _load_tokens(out, e.utt_id, books)
            wav = model.generator(model.condition(tokens)).data[0]
            write_wav(_wav_path(out, e.utt_id), WaveBuffer(wav.astype(np.float64), cfg.sample_rate))
            paths.append(_wav_path(out, e.utt_id))
    _write_stamp(out, "wavs", cfg, paths)
    return paths


def cmd_evaluate(manifest, cfg, out):
    out = Path(out)
    verify_stage(out, "wavs", cfg)
    pairs = [(e.utt_id, e.wav_path, _wav_path(out, e.utt_id))
             for e in manifest.split(cfg.eval_split)]
    report = evaluate_pair_set(pairs, cfg.sample_rate, cfg.eval_frame_ms)
    write_report(report, out / "eval", label="tokens",
                 resolution=f"({', '.join(f'{r:g}' for r in cfg.ladder)})")
    _write_stamp(out, "eval", cfg, [out / "eval" / "report.csv", out / "eval" / "summary.json"])
    return report


def write_report(report: EvalReport, directory, label="resynthesis", resolution=""):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    report.write_csv(directory / "report.csv")
    (directory / "report.txt").write_text(report.table(label, resolution) + "\n")
    (directory / "summary.json").write_text(json.dumps(report.summary(), indent=1) + "\n")


def cmd_end_to_end(manifest, cfg, out, progress=None):
    """All stages in order; returns the evaluation report."""
    stages = [
        ("extract", lambda: cmd_extract(manifest, cfg, out)),
        ("train-resyn", lambda: cmd_train_resyn(manifest, cfg, out, progress)),
        ("fit-codebooks", lambda: cmd_fit_codebooks(manifest, cfg, out)),
        ("tokenize", lambda: cmd_tokenize(manifest, cfg, out)),
        ("train-unit-vocoder", lambda: cmd_train_unit_vocoder(manifest, cfg, out, progress)),
        ("resynth", lambda: cmd_resynth(manifest, cfg, out)),
        ("evaluate", lambda: cmd_evaluate(manifest, cfg, out)),
    ]
    report = None
    for name, run in stages:
        log.info("stage %s -> %s", name, out)
        report = run()
    return report


# ablation ------------------------------------------------------------------

def ladder_dirname(ladder: ResolutionLadder):
    return "ladder_" + "_".join(f"{r:g}" for r in ladder.resolutions_ms)


def _token_count(manifest, cfg, out):
    total = 0
    seconds = 0.0
    books = load_codebooks(cfg, out)
    for e in manifest.split(cfg.eval_split):
        tokens = _load_tokens(out, e.utt_id, books)
        total += tokens.total_tokens
        seconds += len(tokens.streams[0]) * cfg.frame_ms / 1000.0
    return total, seconds


def cmd_ablate(manifest, ladders, cfg, out, train_missing=True, progress=None):
    """One evaluation row per ladder plus token-count and tokens/s columns.

    A ladder whose artifacts are missing (and are not trained here) is
    reported as absent; the remaining ladders still run.
    """
    out = Path(out)
    rows = []
    records = []
    for ladder in ladders:
        ladder = ladder if isinstance(ladder, ResolutionLadder) else ResolutionLadder(tuple(ladder))
        sub = out / ladder_dirname(ladder)
        lcfg = cfg.replace(ladder=list(ladder.resolutions_ms))
        label = "(" + ", ".join(f"{r:g}" for r in ladder.resolutions_ms) + ")"
        summary = None
        try:
            if train_missing:
                try:
                    verify_stage(sub, "eval", lcfg)
                except StaleArtifactError:
                    cmd_end_to_end(manifest, lcfg, sub, progress)
            verify_stage(sub, "eval", lcfg)
            summary = json.loads((sub / "eval" / "summary.json").read_text())
            count, seconds = _token_count(manifest, lcfg, sub)
            summary["tokens"] = count
            summary["tokens/s"] = ladder.tokens_per_second()
            summary["measured tokens/s"] = count / seconds if seconds else None
        except DataError as exc:
            log.warning("ladder %s: %s; row marked absent", label, exc)
            summary = None
        rows.append(("tokens", label, summary))
        records.append({"ladder_ms": list(ladder.resolutions_ms), "summary": summary})
    out.mkdir(parents=True, exist_ok=True)
    table = format_table(rows, extra_columns=("tokens", "tokens/s"))
    (out / "ablation.txt").write_text(table + "\n")
    (out / "ablation.json").write_text(json.dumps(records, indent=1) + "\n")
    return rows, table


# synthetic corpus ------------------------------------------------------------

def cmd_gen_synthetic_data(out, n_train=5, n_valid=0, n_test=0, seed=0, duration_s=2.0,
                           sample_rate=8000):
    out = Path(out)
    total = n_train + n_valid + n_test
    clips = synth_corpus(total, seed=seed, duration_s=duration_s, sample_rate=sample_rate)
    splits = ["train"] * n_train + ["valid"] * n_valid + ["test"] * n_test
    entries = []
    for i, (clip, split) in enumerate(zip(clips, splits)):
        utt = f"synth{i:03d}"
        wav = out / "wavs" / f"{utt}.wav"
        write_wav(wav, clip)
        entries.append(ManifestEntry(utt, wav, split))
    manifest = Manifest(entries)
    manifest.save(out / "manifest.jsonl")
    return manifest
