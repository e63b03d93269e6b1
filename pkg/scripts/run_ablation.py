#!/usr/bin/env python3
"""Component and depth ablation on the desk-scale synthetic benchmark.

Generates the dataset into OUT/data, then runs ``catnet ablate`` on it.
"""

import argparse
import sys
from pathlib import Path

from catnet import cli


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--iters", default="2000")
    ap.add_argument("--seed", default="0")
    args = ap.parse_args()
    data = Path(args.out) / "data"
    if cli.main(["gen", "--seed", "0", "--out", str(data)]):
        return 1
    return cli.main(["-v", "ablate", "--data", str(data), "--out", args.out, "--iters", args.iters,
                     "--seed", args.seed, "--depth", "4"])


if __name__ == "__main__":
    sys.exit(main())
