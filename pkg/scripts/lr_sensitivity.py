"""How the comparison depends on the adaptation learning rate.

Reruns the desk lineup for each learning rate in a grid and prints KNN@5
means per arm, plus the mean final training loss (training convergence is
what picked the lr in configs/table1_desk.json, not test accuracy).

    python scripts/lr_sensitivity.py --lrs 0.01 0.05 0.1 0.2 --seeds 0 1 2 3 4
"""

import argparse
import dataclasses
from pathlib import Path

import numpy as np

from metalora.config import RunConfig
from metalora.evaluation import run_comparison


def main(argv=None):
    p = argparse.ArgumentParser()
    p.add_argument("--config", default=str(Path(__file__).resolve().parents[1] / "configs" / "table1_desk.json"))
    p.add_argument("--lrs", type=float, nargs="+", default=[0.01, 0.05, 0.1, 0.2])
    p.add_argument("--seeds", type=int, nargs="+")
    args = p.parse_args(argv)
    cfg = RunConfig.from_json(args.config)
    if args.seeds:
        cfg = cfg.replace(seeds=args.seeds)
    for lr in args.lrs:
        table = run_comparison(cfg.replace(optim=dataclasses.replace(cfg.optim, lr=lr)))
        print(f"lr={lr}")
        for a in table.arms:
            losses = [x for x in a.final_loss if np.isfinite(x)]
            loss = f"{np.mean(losses):.3f}" if losses else "-"
            print(f"  {a.arm.label:<24} KNN@5 {100 * a.mean(5):6.2f}%  final train loss {loss}")


if __name__ == "__main__":
    main()
