"""How often Ellip's average Sharpe ratio beats Mark's, across seeds.

Runs the same path as ``robust-portfolio compare --assets N --truth-seed s
--seed s`` for both sample arms and prints the per-seed difference of average
Sharpe ratios (mean over the two arms).

    python3 scripts/seed_study.py --seeds 20 --assets 31
"""

import argparse

import numpy as np

from robust_portfolio.evaluation import EvalConfig, derive_seed, run_experiment
from robust_portfolio.market_data import SimulationConfig, make_ground_truth


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--assets", type=int, default=31)
    ap.add_argument("--history", type=int, default=193)
    ap.add_argument("--beta", type=int, default=8000)
    args = ap.parse_args()

    diffs = []
    for seed in range(args.seeds):
        mean, cov = make_ground_truth(args.assets, seed=seed, history=args.history)
        cfg = EvalConfig(seed=seed, beta=args.beta)
        arm = []
        for samples in (args.history, 1000):
            sim = SimulationConfig(mean, cov, samples, seed=derive_seed(seed, "simulation"))
            rep = run_experiment(sim, cfg, frontiers=False).report
            arm.append(rep.column("ellip").mean() - rep.column("mark").mean())
        diffs.append(float(np.mean(arm)))
        print(f"seed {seed:3d}  zeta arm {arm[0]:+.4f}  1000 arm {arm[1]:+.4f}  mean {diffs[-1]:+.4f}")
    wins = sum(d >= 0 for d in diffs)
    print(f"Ellip >= Mark in {wins}/{len(diffs)} seeds; median difference {np.median(diffs):+.4f}")


if __name__ == "__main__":
    main()
