#!/usr/bin/env python3
"""Generate the reference corpus and run a full cross-validation on it.

    python scripts/run_crossval.py --out runs/ref
"""
import argparse
import sys
from pathlib import Path

from relseg.cli import main

ROOT = Path(__file__).resolve().parents[1]


def run():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--count", type=int, default=200)
    ap.add_argument("--size", default="32x32")
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--config", default=str(ROOT / "configs" / "reference.cfg"))
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    out = Path(args.out)
    data = out / "data"
    if not (data / "manifest.csv").exists():
        code = main(["generate", "--count", str(args.count), "--size", args.size, "--seed", str(args.seed),
                     "--out", str(data)])
        if code:
            return code
    return main(["-v", "crossval", "--data", str(data), "--configs", args.config, "--seed", str(args.seed),
                 "--jobs", str(args.jobs), "--out", str(out / "cv")])


if __name__ == "__main__":
    sys.exit(run())
