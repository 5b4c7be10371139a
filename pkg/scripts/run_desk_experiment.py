#!/usr/bin/env python3
"""Run the full desk-scale experiment: data, training, adaptation, report."""

import argparse
import sys
import time

from ttaseg.cli import main as ttaseg_main

STAGES = ["gen-data", "train-seg", "train-dae", "adapt", "evaluate", "report"]


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--profile", default="desk")
    ap.add_argument("--config", default=None)
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--plots", action="store_true")
    args = ap.parse_args()

    common = ["--profile", args.profile, "--out", args.out, "--workers", str(args.workers)]
    if args.config:
        common += ["--config", args.config]
    if args.seed is not None:
        common += ["--seed", str(args.seed)]

    t0 = time.time()
    for stage in STAGES:
        argv = [stage] + common
        if stage == "report" and args.plots:
            argv.append("--plots")
        rc = ttaseg_main(argv)
        if rc != 0:
            print(f"stage {stage} failed with exit code {rc}", file=sys.stderr)
            return rc
        print(f"[{time.time() - t0:7.1f}s] {stage} done")
    return 0


if __name__ == "__main__":
    sys.exit(main())
