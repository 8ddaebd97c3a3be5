"""Command-line front end.

Exit codes: 0 success, 1 computation or data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field, fields

import numpy as np

from .estimation import estimate_moments
from .evaluation import (
    EvalConfig,
    SweepReport,
    derive_seed,
    efficient_frontier,
    calibrate_all,
    format_summary,
    frontier_csv,
    run_experiment,
    summarize_max_avg_sharpe,
    write_artifacts,
)
from .market_data import (
    DataError,
    ReturnMatrix,
    SimulationConfig,
    compute_log_returns,
    format_return_table,
    make_ground_truth,
    parse_price_table,
    parse_return_table,
    simulate_returns,
)
from .optimizer import KINDS, SolverConfig, SolverError

EXIT_OK, EXIT_COMPUTE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Merged run settings: defaults < JSON config file < command-line flags.

    ``simulation`` (when set) holds ``samples`` plus exactly one moment source:
    ``mean``/``covariance`` arrays, ``source_csv`` (moments of that file's
    returns; ``samples`` may be ``"match"`` to reuse its row count), or
    ``synthetic_assets`` with an optional ``truth_seed``.
    """

    csv: str | None = None
    returns_input: bool = False
    forward_fill: bool = False
    simulation: dict | None = None
    alpha: float = 0.05
    beta: int = 8000
    lambda_grid: list = field(default_factory=lambda: [2.0, 2.5, 3.0, 3.5, 4.0])
    frontier_points: int = 60
    frontier_range: list = field(default_factory=lambda: [0.05, 200.0])
    rf_annual: float = 0.06
    periods_per_year: int = 252
    seed: int = 0
    tolerance: float = 1e-8
    max_iterations: int = 200_000
    holdout_fraction: float = 0.0
    workers: int = 1
    label: str = ""
    out: str = "out"

    @classmethod
    def from_sources(cls, config_path: str | None, overrides: dict) -> "RunConfig":
        values: dict = {}
        if config_path:
            try:
                with open(config_path, encoding="utf-8") as fh:
                    values = json.load(fh)
            except (OSError, json.JSONDecodeError) as exc:
                raise UsageError(f"cannot read config {config_path}: {exc}") from None
            if not isinstance(values, dict):
                raise UsageError("config file must hold a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        values.update({k: v for k, v in overrides.items() if v is not None})
        cfg = cls(**values)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        own_moments = self.simulation and any(
            k in self.simulation for k in ("mean", "covariance", "synthetic_assets", "source_csv"))
        if self.csv and own_moments:
            raise UsageError("give either a CSV data source or a simulation block, not both")
        if not self.csv and not self.simulation:
            raise UsageError("no data source: pass --csv or a simulation block")
        if self.simulation is not None and "samples" not in self.simulation:
            raise UsageError("simulation block needs 'samples'")
        if not 0 < self.alpha < 1:
            raise UsageError("alpha must lie in (0, 1)")
        if self.beta < 100:
            raise UsageError("beta must be >= 100")
        if not self.lambda_grid or min(self.lambda_grid) <= 0:
            raise UsageError("lambda grid must be non-empty and positive")

    def eval_config(self) -> EvalConfig:
        lo, hi = self.frontier_range
        return EvalConfig(
            lambda_grid=tuple(self.lambda_grid),
            frontier_lambdas=tuple(np.logspace(np.log10(lo), np.log10(hi), self.frontier_points)),
            rf_annual=self.rf_annual,
            periods_per_year=self.periods_per_year,
            alpha=self.alpha,
            beta=self.beta,
            seed=self.seed,
            holdout_fraction=self.holdout_fraction,
            workers=self.workers,
        )

    def solver_config(self) -> SolverConfig:
        return SolverConfig(max_iterations=self.max_iterations, tolerance=self.tolerance)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _read(path: str) -> str:
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from None


def load_returns(path: str, returns_input: bool = False, forward_fill: bool = False) -> ReturnMatrix:
    text = _read(path)
    if returns_input:
        return parse_return_table(text)
    return compute_log_returns(parse_price_table(text, forward_fill=forward_fill))


def simulation_config(cfg: RunConfig) -> SimulationConfig:
    sim = dict(cfg.simulation)
    samples = sim["samples"]
    tickers = None
    if "mean" in sim or "covariance" in sim:
        mean, cov = np.asarray(sim["mean"], float), np.asarray(sim["covariance"], float)
    elif "source_csv" in sim or cfg.csv:
        source = load_returns(sim.get("source_csv") or cfg.csv, cfg.returns_input, cfg.forward_fill)
        moments = estimate_moments(source)
        mean, cov, tickers = moments.mu_hat, moments.sigma_hat, source.tickers
        if samples == "match":
            samples = source.n
    elif "synthetic_assets" in sim:
        mean, cov = make_ground_truth(int(sim["synthetic_assets"]), int(sim.get("truth_seed", 0)),
                                      sim.get("history", 193))
    else:
        raise UsageError("simulation block needs mean/covariance, source_csv or synthetic_assets")
    if samples == "match":
        raise UsageError("samples='match' requires a source CSV")
    return SimulationConfig(mean, cov, int(samples), derive_seed(cfg.seed, "simulation"),
                            sim.get("jitter"), tickers)


def dataset(cfg: RunConfig):
    if cfg.simulation is not None:
        return simulation_config(cfg)
    return load_returns(cfg.csv, cfg.returns_input, cfg.forward_fill)


def _write(path: str, text: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def cmd_ingest(args) -> int:
    returns = load_returns(args.csv, args.passthrough, args.forward_fill)
    path = os.path.join(args.out, "returns.csv")
    _write(path, format_return_table(returns))
    print(path)
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _run_config(args)
    if cfg.simulation is None:
        raise UsageError("simulate needs --samples or a simulation block")
    returns = simulate_returns(simulation_config(cfg))
    path = os.path.join(cfg.out, "returns.csv")
    _write(path, format_return_table(returns))
    print(path)
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _run_config(args)
    eval_cfg = cfg.eval_config()
    result = run_experiment(dataset(cfg), eval_cfg, cfg.solver_config(), label=cfg.label)
    written = write_artifacts(result, cfg.out, eval_cfg, {"run_config": cfg.as_dict()})
    sys.stdout.write(result.report.to_csv())
    for path in written:
        print(path, file=sys.stderr)
    return EXIT_OK


def cmd_frontier(args) -> int:
    cfg = _run_config(args)
    eval_cfg = cfg.eval_config()
    data = dataset(cfg)
    returns = simulate_returns(data) if isinstance(data, SimulationConfig) else data
    moments, sets = calibrate_all(returns, eval_cfg)
    points = efficient_frontier(args.model, moments, sets, eval_cfg, cfg.solver_config())
    path = os.path.join(cfg.out, f"frontier_{args.model}.csv")
    _write(path, frontier_csv({args.model: points}))
    print(path)
    return EXIT_OK


def cmd_summary(args) -> int:
    reports = []
    for path in args.reports:
        try:
            reports.append(SweepReport.from_dict(json.loads(_read(path))))
        except (KeyError, ValueError) as exc:
            raise UsageError(f"{path} is not a sweep report: {exc}") from None
    labels = args.labels.split(",") if args.labels else None
    if labels is not None and len(labels) != len(reports):
        raise UsageError("--labels needs one label per report")
    text = format_summary(summarize_max_avg_sharpe(reports, labels))
    if args.out:
        _write(os.path.join(args.out, "summary.csv"), text)
    sys.stdout.write(text)
    return EXIT_OK


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _samples(text: str):
    if text == "match":
        return text
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError("--samples takes a positive integer or 'match'") from None


def _run_config(args) -> RunConfig:
    overrides = {
        "csv": args.csv,
        "returns_input": True if args.passthrough else None,
        "forward_fill": True if args.forward_fill else None,
        "alpha": args.alpha,
        "beta": args.beta,
        "lambda_grid": args.lambda_grid,
        "rf_annual": args.rf_annual,
        "seed": args.seed,
        "out": args.out,
        "label": args.label,
        "workers": args.workers,
    }
    cfg_file = args.config
    if args.samples is not None or args.assets is not None:
        sim = {}
        if cfg_file:
            try:
                sim = dict(json.loads(_read(cfg_file)).get("simulation") or {})
            except (json.JSONDecodeError, AttributeError) as exc:
                raise UsageError(f"cannot read config {cfg_file}: {exc}") from None
        if args.samples is not None:
            sim["samples"] = args.samples
        if args.assets is not None:
            sim = {k: v for k, v in sim.items() if k not in ("mean", "covariance", "source_csv")}
            sim["synthetic_assets"] = args.assets
            sim["truth_seed"] = args.truth_seed
        elif args.csv:
            sim = {k: v for k, v in sim.items() if k not in ("mean", "covariance", "synthetic_assets")}
        overrides["simulation"] = sim
    return RunConfig.from_sources(cfg_file, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robust-portfolio", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def data_flags(p, with_model=False):
        p.add_argument("--config", help="JSON file mirroring the run configuration")
        p.add_argument("--csv", help="adjusted-close price CSV (or returns with --passthrough)")
        p.add_argument("--passthrough", action="store_true", help="CSV already holds log returns")
        p.add_argument("--forward-fill", action="store_true", help="fill missing prices from the previous day")
        p.add_argument("--samples", type=_samples, help="simulate this many rows ('match' = source row count)")
        p.add_argument("--assets", type=int, help="simulate from a synthetic ground truth with this many assets")
        p.add_argument("--truth-seed", type=int, default=0, help="seed of the synthetic ground truth")
        p.add_argument("--seed", type=int, help="top-level seed (default 0)")
        p.add_argument("--alpha", type=float)
        p.add_argument("--beta", type=int, help="bootstrap resample count")
        p.add_argument("--lambda-grid", type=_floats, help="comma-separated risk aversions")
        p.add_argument("--rf-annual", type=float)
        p.add_argument("--workers", type=int, help="threads for the bootstrap")
        p.add_argument("--label", help="dataset label stored in reports")
        p.add_argument("--out", help="output directory")
        if with_model:
            p.add_argument("--model", required=True, choices=KINDS)

    p = sub.add_parser("ingest", help="prices CSV -> log-return CSV")
    p.add_argument("--csv", required=True)
    p.add_argument("--passthrough", action="store_true", help="input already holds log returns")
    p.add_argument("--forward-fill", action="store_true")
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_ingest)

    for name, func, helptext in [
        ("simulate", cmd_simulate, "draw multivariate-normal returns"),
        ("compare", cmd_compare, "sweep risk aversion and write comparison artifacts"),
    ]:
        p = sub.add_parser(name, help=helptext)
        data_flags(p)
        p.set_defaults(func=func)

    p = sub.add_parser("frontier", help="trace one model's efficient frontier")
    data_flags(p, with_model=True)
    p.set_defaults(func=cmd_frontier)

    p = sub.add_parser("summary", help="maximum average Sharpe ratio over sweep reports")
    p.add_argument("reports", nargs="+", help="sweep.json files")
    p.add_argument("--labels", help="comma-separated scenario labels")
    p.add_argument("--out")
    p.set_defaults(func=cmd_summary)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, SolverError, ValueError, np.linalg.LinAlgError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPUTE


if __name__ == "__main__":
    sys.exit(main())
