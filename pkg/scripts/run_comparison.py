"""Full comparison: 31- and 98-asset scenarios, each with two simulated arms.

Each scenario draws a synthetic ground truth from the sample moments of a
history of ``zeta`` days, then simulates ``zeta`` and 1000 samples from it.
Pass ``--prices31``/``--prices98`` to use real adjusted-close CSVs as the
moment source instead (the historical arm is then run as well).

    python3 scripts/run_comparison.py --out results
"""

import argparse
import os
import time

from robust_portfolio.cli import load_returns
from robust_portfolio.estimation import estimate_moments
from robust_portfolio.evaluation import (
    EvalConfig,
    derive_seed,
    format_summary,
    run_experiment,
    summarize_max_avg_sharpe,
    write_artifacts,
)
from robust_portfolio.market_data import SimulationConfig, make_ground_truth

SCENARIOS = {31: 193, 98: 442}   # assets -> history length (zeta)


def scenario_arms(n_assets, zeta, prices, seed):
    """Yield (label, dataset) pairs for one scenario."""
    if prices:
        hist = load_returns(prices)
        m = estimate_moments(hist)
        mean, cov, zeta = m.mu_hat, m.sigma_hat, hist.n
        yield f"N={n_assets} market", hist
    else:
        mean, cov = make_ground_truth(n_assets, seed=seed, history=zeta)
    sim_seed = derive_seed(seed, "simulation")
    yield f"N={n_assets} sim zeta={zeta}", SimulationConfig(mean, cov, zeta, seed=sim_seed)
    yield f"N={n_assets} sim 1000", SimulationConfig(mean, cov, 1000, seed=sim_seed)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--beta", type=int, default=8000)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--prices31")
    ap.add_argument("--prices98")
    args = ap.parse_args()

    cfg = EvalConfig(seed=args.seed, beta=args.beta, workers=args.workers)
    reports = []
    for n_assets, zeta in SCENARIOS.items():
        prices = getattr(args, f"prices{n_assets}")
        for label, data in scenario_arms(n_assets, zeta, prices, args.seed):
            t0 = time.perf_counter()
            result = run_experiment(data, cfg, label=label)
            slug = label.replace(" ", "_").replace("=", "")
            write_artifacts(result, os.path.join(args.out, slug), cfg)
            reports.append(result.report)
            print(f"== {label} ({time.perf_counter() - t0:.1f}s)")
            print(result.report.to_csv())

    summary = format_summary(summarize_max_avg_sharpe(reports))
    with open(os.path.join(args.out, "summary.csv"), "w", encoding="utf-8") as fh:
        fh.write(summary)
    print("== maximum average Sharpe ratio")
    print(summary)


if __name__ == "__main__":
    main()
