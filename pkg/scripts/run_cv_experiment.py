#!/usr/bin/env python3
"""Desk-scale cross-validation experiment: synth -> train -> eval.

Produces the full run directory (manifest, fold plan, checkpoints, loss
logs, Table-style report) under --workdir.  With default settings this is
the quantitative stand-in for the clinical study: 40 cases at 32x32x16,
300 epochs, batch 5, lr 0.0005, patient-grouped 5-fold CV.
"""

import argparse
import sys
import time
from pathlib import Path

from earmark.cli import main as earmark


def run(argv):
    print("+ earmark", " ".join(argv), flush=True)
    code = earmark(argv)
    if code != 0:
        sys.exit(code)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workdir", type=Path, default=Path("runs/cv_experiment"))
    ap.add_argument("--cases", type=int, default=40)
    ap.add_argument("--dims", default="32,32,16")
    ap.add_argument("--spacing", default="0.3,0.3,0.6")
    ap.add_argument("--epochs", type=int, default=300)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    ds = args.workdir / "dataset"
    run_dir = args.workdir / "run"
    t0 = time.time()
    run(["synth", "--out", str(ds), "--cases", str(args.cases),
         "--dims", args.dims, "--spacing", args.spacing, "--seed", str(args.seed)])
    run(["train", "--data", str(ds), "--out", str(run_dir),
         "--epochs", str(args.epochs), "--seed", str(args.seed)])
    run(["eval", "--data", str(ds), "--run", str(run_dir)])
    print(f"\ntotal {time.time() - t0:.0f}s; report at {run_dir / 'report.txt'}")


if __name__ == "__main__":
    main()
