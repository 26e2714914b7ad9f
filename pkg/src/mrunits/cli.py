"""Command-line entry point; one subcommand per pipeline stage.

Exit codes: 0 success, 1 usage or config error, 2 data error (including
stale artifacts), 3 non-finite loss.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline as P
from .config import ConfigError, RunConfig, desk_config
from .features import FeatureDumpError
from .quantizer import CodebookError
from .resampler import ResolutionLadder
from .train import NumericError

log = logging.getLogger("mrunits")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _common(p):
    p.add_argument("--config", type=Path, help="JSON run config")
    p.add_argument("--profile", choices=("desk", "full"), default="desk",
                   help="base settings used when --config is not given (default: desk)")
    p.add_argument("--manifest", type=Path, help="JSON Lines manifest")
    p.add_argument("--out", type=Path, default=Path("runs/desk"), help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--ladder", help='comma-separated resolutions in ms, e.g. "20,40,80"')
    p.add_argument("--k", type=int, help="codebook size per level")
    p.add_argument("--set", action="append", default=[], metavar="KEY=JSON",
                   help="override any config key (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = _Parser(prog="mrunits", description="Multi-resolution unit pipeline.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, helptext in [
        ("extract", "layered frame features per utterance"),
        ("train-resyn", "train fusion, resampler and vocoder on continuous features"),
        ("fit-codebooks", "k-means codebook per ladder level"),
        ("tokenize", "token streams per utterance"),
        ("train-unit-vocoder", "train the token-to-waveform vocoder"),
        ("resynth", "synthesize the evaluation split from tokens"),
        ("evaluate", "score resynthesized audio against references"),
        ("run-all", "every stage from extract to evaluate"),
    ]:
        _common(sub.add_parser(name, help=helptext))
    ab = sub.add_parser("ablate", help="compare resolution ladders")
    _common(ab)
    ab.add_argument("--ladders", default="20;20,40;20,40,80",
                    help='semicolon-separated ladders (default "20;20,40;20,40,80")')
    ab.add_argument("--no-train", action="store_true",
                    help="only report ladders whose artifacts already exist")
    gen = sub.add_parser("gen-synthetic-data", help="write the seeded synthetic corpus")
    _common(gen)
    gen.add_argument("--n-train", type=int, default=5)
    gen.add_argument("--n-valid", type=int, default=0)
    gen.add_argument("--n-test", type=int, default=0)
    gen.add_argument("--duration", type=float, default=2.0, help="seconds per clip")
    return parser


def resolve_config(args):
    """Config file (or profile) with command-line overrides applied."""
    if args.config is not None:
        cfg = RunConfig.load(args.config)
    elif args.profile == "desk":
        cfg = desk_config()
    else:
        cfg = RunConfig()
    changes = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            changes[key] = json.loads(value)
        except json.JSONDecodeError:
            changes[key] = value
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.ladder is not None:
        changes["ladder"] = args.ladder
    if args.k is not None:
        changes["k"] = args.k
    return cfg.replace(**changes) if changes else cfg


def _parse_ladders(text):
    ladders = []
    for part in text.split(";"):
        if part.strip():
            try:
                ladders.append(ResolutionLadder.parse(part))
            except ValueError as exc:
                raise ConfigError(f"--ladders: {exc}") from exc
    return ladders


def _manifest(args):
    if args.manifest is None:
        raise ConfigError("--manifest is required for this command")
    return P.Manifest.load(args.manifest)


def _progress(every=100):
    def report(row):
        step = row[0]
        if step % every == 0:
            log.info("step %d  mel %.4f  fm %.4f  adv_g %.4f  adv_d %.4f", *row)
    return report


def run(args):
    cfg = resolve_config(args)
    out = args.out
    cmd = args.command
    if cmd == "gen-synthetic-data":
        m = P.cmd_gen_synthetic_data(out, args.n_train, args.n_valid, args.n_test,
                                     seed=cfg.seed, duration_s=args.duration,
                                     sample_rate=cfg.sample_rate)
        print(f"wrote {len(m)} clips and {out / 'manifest.jsonl'}")
        return
    manifest = _manifest(args)
    if cmd == "extract":
        r = P.cmd_extract(manifest, cfg, out)
        print(f"written {len(r['written'])}, skipped {len(r['skipped'])}")
    elif cmd == "train-resyn":
        r = P.cmd_train_resyn(manifest, cfg, out, _progress())
        print(f"eval mel {r.eval_mel_initial:.4f} -> {r.eval_mel_final:.4f}")
    elif cmd == "fit-codebooks":
        for book in P.cmd_fit_codebooks(manifest, cfg, out):
            print(f"{book.resolution_ms:g} ms: k={book.k} distortion={book.distortion:.6g}")
    elif cmd == "tokenize":
        print(f"tokenized {len(P.cmd_tokenize(manifest, cfg, out))} utterances")
    elif cmd == "train-unit-vocoder":
        r = P.cmd_train_unit_vocoder(manifest, cfg, out, _progress())
        print(f"eval mel {r.eval_mel_initial:.4f} -> {r.eval_mel_final:.4f}")
    elif cmd == "resynth":
        print(f"synthesized {len(P.cmd_resynth(manifest, cfg, out))} utterances")
    elif cmd == "evaluate":
        P.cmd_evaluate(manifest, cfg, out)
        print((out / "eval" / "report.txt").read_text(), end="")
    elif cmd == "run-all":
        P.cmd_end_to_end(manifest, cfg, out, _progress())
        print((out / "eval" / "report.txt").read_text(), end="")
    elif cmd == "ablate":
        _, table = P.cmd_ablate(manifest, _parse_ladders(args.ladders), cfg, out,
                                train_missing=not args.no_train, progress=_progress())
        print(table)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (P.DataError, FeatureDumpError, CodebookError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
