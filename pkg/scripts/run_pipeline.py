#!/usr/bin/env python3
"""End-to-end experiment: synthesize data, split, train, and run the full
quantization ablation, leaving every artifact under one run directory.

    python3 scripts/run_pipeline.py --out runs/demo --seed 11
"""

import argparse
import sys
from pathlib import Path

from swinq.cli import main as swinq


def run(args):
    out = Path(args.out)
    steps = [
        ["synth-data", "--out-dir", str(out), "--classes", str(args.classes),
         "--per-class", str(args.per_class), "--size", str(args.size),
         "--seed", str(args.seed)],
        ["split", "--data", str(out / "dataset"), "--out-dir", str(out),
         "--seed", str(args.seed)],
        ["train", "--data", str(out / "dataset"), "--manifest", str(out / "manifest.json"),
         "--preset", args.preset, "--epochs", str(args.epochs),
         "--out-dir", str(out), "--seed", str(args.seed)],
        ["ablate", "--data", str(out / "dataset"), "--manifest", str(out / "manifest.json"),
         "--checkpoint", str(out / "checkpoint.swta"),
         "--model-config", str(out / "model_config.json"),
         "--dataset-name", "synthetic", "--out-dir", str(out / "ablation"),
         "--seed", str(args.seed)],
    ]
    for step in steps:
        print(f"\n$ swinq {' '.join(step)}")
        code = swinq(step)
        if code != 0:
            return code
    print(f"\ndone; see {out / 'ablation' / 'report.md'}")
    return 0


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/demo")
    parser.add_argument("--seed", type=int, default=11)
    parser.add_argument("--classes", type=int, default=4)
    parser.add_argument("--per-class", type=int, default=500)
    parser.add_argument("--size", type=int, default=32)
    parser.add_argument("--preset", default="small")
    parser.add_argument("--epochs", type=int, default=6)
    sys.exit(run(parser.parse_args()))
