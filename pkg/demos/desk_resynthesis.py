"""Train and evaluate the token vocoder on a small synthetic corpus.

Runs every pipeline stage with the desk profile and prints the evaluation
table. The default step counts take several minutes on one CPU core; pass
``--resyn-steps 200 --unit-steps 100`` for a quick look.

    python demos/desk_resynthesis.py --out runs/demo
"""
import argparse
import logging
from pathlib import Path

from mrunits import pipeline as P
from mrunits.config import desk_config

parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
parser.add_argument("--out", type=Path, default=Path("runs/demo"))
parser.add_argument("--clips", type=int, default=5)
parser.add_argument("--resyn-steps", type=int, default=None)
parser.add_argument("--unit-steps", type=int, default=None)
args = parser.parse_args()
logging.basicConfig(level=logging.INFO, format="%(message)s")

overrides = {}
if args.resyn_steps is not None:
    overrides["resyn_steps"] = args.resyn_steps
if args.unit_steps is not None:
    overrides["unit_steps"] = args.unit_steps
cfg = desk_config(**overrides)

manifest = P.cmd_gen_synthetic_data(args.out / "data", n_train=args.clips)


def progress(row):
    step, mel = row[0], row[1]
    if step % 100 == 0:
        print(f"  step {step:5d}  mel {mel:.3f}")


P.cmd_extract(manifest, cfg, args.out)
res = P.cmd_train_resyn(manifest, cfg, args.out, progress)
print(f"feature vocoder: full-clip mel loss {res.eval_mel_initial:.3f} -> "
      f"{res.eval_mel_final:.3f}")
P.cmd_fit_codebooks(manifest, cfg, args.out)
P.cmd_tokenize(manifest, cfg, args.out)
P.cmd_train_unit_vocoder(manifest, cfg, args.out, progress)
P.cmd_resynth(manifest, cfg, args.out)
P.cmd_evaluate(manifest, cfg, args.out)
print((args.out / "eval" / "report.txt").read_text(), end="")
print(f"audio in {args.out / 'wavs'}")
