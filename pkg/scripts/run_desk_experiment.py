#!/usr/bin/env python3
"""Desk-scale end-to-end run: 3 seeds x 2k episodes at depth 4, then Dice
under both evaluation settings and the per-iteration Dice trace."""

import argparse
import logging
from pathlib import Path

from catnet import plot
from catnet.config import RunConfig
from catnet.experiments import desk_training_run


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--iters", type=int, default=2000)
    ap.add_argument("--lr", type=float, default=0.001)
    ap.add_argument("--depth", type=int, default=4)
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--data-seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = RunConfig(iters=args.iters, lr=args.lr, depth=args.depth)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    result = desk_training_run(cfg, seeds, args.data_seed)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.txt").write_text(result.summary())
    for r in result.runs:
        plot.loss_curve(r.state.loss_curve, out / f"loss_seed{r.seed}.png")
        (out / f"report_seed{r.seed}_setting2.kv").write_text(r.setting_2.to_kv())
    print(result.summary(), end="")


if __name__ == "__main__":
    main()
