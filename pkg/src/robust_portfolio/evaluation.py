"""Risk-aversion sweeps, Sharpe ratios, efficient frontiers and report artifacts."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import platform
from dataclasses import dataclass, field, replace

import numpy as np

from . import __version__
from .estimation import (
    COVARIANCE_CONVENTION,
    QUANTILE_RULE,
    SIGMA_MU_CONVENTION,
    BoxSet,
    EllipsoidSet,
    MomentEstimates,
    SeparableSet,
    bootstrap_separable,
    calibrate_box,
    calibrate_ellipsoid,
    estimate_moments,
)
from .market_data import RNG_ALGORITHM, ReturnMatrix, SimulationConfig, simulate_returns
from .optimizer import DISPLAY_NAMES, KINDS, ModelSpec, SolverConfig, SolverError, solve

RF_CONVENTION = "per-period rf = ln(1 + rf_annual) / periods_per_year; Sharpe not annualized"
SR_COLUMNS = tuple(f"SR_{DISPLAY_NAMES[k]}" for k in KINDS)

_PURPOSES = {"simulation": 1, "bootstrap": 2}


def derive_seed(seed: int, purpose: str) -> int:
    """Independent 63-bit seed for one use of the top-level seed."""
    state = np.random.SeedSequence([int(seed), _PURPOSES[purpose]]).generate_state(2, np.uint32)
    return (int(state[0]) << 31) ^ int(state[1])


class UndefinedSharpeError(ZeroDivisionError):
    pass


class SweepError(SolverError):
    def __init__(self, kind: str, lam: float, detail: str):
        super().__init__(f"{DISPLAY_NAMES[kind]} model at lambda={lam:g}: {detail}")
        self.kind = kind
        self.lam = lam


@dataclass(frozen=True)
class EvalConfig:
    lambda_grid: tuple[float, ...] = (2.0, 2.5, 3.0, 3.5, 4.0)
    frontier_lambdas: tuple[float, ...] = tuple(np.logspace(math.log10(0.05), math.log10(200.0), 60))
    rf_annual: float = 0.06
    periods_per_year: int = 252
    alpha: float = 0.05
    beta: int = 8000
    seed: int = 0
    holdout_fraction: float = 0.0  # > 0 evaluates on the trailing rows only
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "lambda_grid", tuple(float(v) for v in self.lambda_grid))
        object.__setattr__(self, "frontier_lambdas", tuple(float(v) for v in self.frontier_lambdas))
        if not self.lambda_grid or not self.frontier_lambdas:
            raise ValueError("lambda grids must be non-empty")
        if min(self.lambda_grid + self.frontier_lambdas) <= 0:
            raise ValueError("all risk-aversion values must be positive")
        if not 0.0 <= self.rf_annual < 1.0:
            raise ValueError("rf_annual must lie in [0, 1)")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must lie in [0, 1)")

    @property
    def rf_period(self) -> float:
        return math.log1p(self.rf_annual) / self.periods_per_year


@dataclass(frozen=True)
class FrontierPoint:
    lam: float
    risk: float
    ret: float
    weights: np.ndarray = field(repr=False)


@dataclass
class SweepReport:
    lambdas: tuple[float, ...]
    sharpe: np.ndarray            # rows follow lambdas, columns follow KINDS
    metadata: dict
    weights: dict = field(default_factory=dict, repr=False)  # (kind, lam) -> weights

    @property
    def average(self) -> np.ndarray:
        return self.sharpe.mean(axis=0)

    @property
    def label(self) -> str:
        return self.metadata.get("label", "")

    def column(self, kind: str) -> np.ndarray:
        return self.sharpe[:, KINDS.index(kind)]

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["lambda", *SR_COLUMNS])
        for lam, row in zip(self.lambdas, self.sharpe):
            writer.writerow([f"{lam:g}", *(f"{v:.3f}" for v in row)])
        writer.writerow(["Avg", *(f"{v:.3f}" for v in self.average)])
        return out.getvalue()

    def to_dict(self) -> dict:
        return {
            "columns": ["lambda", *SR_COLUMNS],
            "rows": [[lam, *row] for lam, row in zip(self.lambdas, self.sharpe.tolist())],
            "average": ["Avg", *self.average.tolist()],
            "metadata": self.metadata,
            "weights": {f"{kind}@{lam:g}": w.tolist() for (kind, lam), w in self.weights.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SweepReport":
        rows = d["rows"]
        weights = {}
        for key, w in d.get("weights", {}).items():
            kind, lam = key.split("@")
            weights[(kind, float(lam))] = np.asarray(w, float)
        return cls(tuple(float(r[0]) for r in rows), np.array([r[1:] for r in rows], float),
                   dict(d["metadata"]), weights)


def portfolio_stats(x, moments: MomentEstimates) -> tuple[float, float]:
    """Expected return and standard deviation of ``x`` under the point estimates."""
    x = np.asarray(x, dtype=float)
    if x.shape != moments.mu_hat.shape:
        raise ValueError(f"weight vector of shape {x.shape} does not match {moments.n_assets} assets")
    variance = float(x @ (moments.sigma_hat @ x))
    return float(moments.mu_hat @ x), math.sqrt(max(variance, 0.0))


def sharpe_ratio(ret: float, risk: float, config: EvalConfig) -> float:
    if not risk > 0:
        raise UndefinedSharpeError(f"Sharpe ratio undefined for portfolio risk {risk}")
    return (ret - config.rf_period) / risk


def _solve_checked(model: ModelSpec, solver: SolverConfig):
    try:
        sol = solve(model, solver)
    except SolverError as exc:
        raise SweepError(model.kind, model.lam, str(exc)) from exc
    if not sol.converged:
        raise SweepError(model.kind, model.lam,
                         f"did not converge (KKT residual {sol.kkt_residual:.3g} after {sol.iterations} iterations)")
    return sol


def _sets_dict(box: BoxSet, ellipsoid: EllipsoidSet, separable: SeparableSet) -> dict:
    return {"box": box, "ellip": ellipsoid, "sep": separable}


def lambda_sweep(
    moments: MomentEstimates,
    box: BoxSet,
    ellipsoid: EllipsoidSet,
    separable: SeparableSet,
    config: EvalConfig | None = None,
    solver: SolverConfig | None = None,
    eval_moments: MomentEstimates | None = None,
    metadata: dict | None = None,
) -> SweepReport:
    """Sharpe ratio of every model at every grid value of risk aversion.

    Portfolios are evaluated against ``eval_moments`` (default: ``moments``).
    """
    config = config or EvalConfig()
    solver = solver or SolverConfig()
    eval_moments = eval_moments or moments
    sets = _sets_dict(box, ellipsoid, separable)
    table = np.empty((len(config.lambda_grid), len(KINDS)))
    weights = {}
    for i, lam in enumerate(config.lambda_grid):
        for j, kind in enumerate(KINDS):
            sol = _solve_checked(ModelSpec.build(kind, moments, lam, sets), solver)
            ret, risk = portfolio_stats(sol.weights, eval_moments)
            table[i, j] = sharpe_ratio(ret, risk, config)
            weights[(kind, lam)] = sol.weights
    meta = {
        "N": moments.n_assets,
        "n": moments.n,
        "alpha": config.alpha,
        "beta": separable.beta,
        "seed": config.seed,
        "rf_annual": config.rf_annual,
        "periods_per_year": config.periods_per_year,
        "rf_convention": RF_CONVENTION,
        "sigma_mu_convention": SIGMA_MU_CONVENTION,
        "covariance_convention": COVARIANCE_CONVENTION,
        "bootstrap_quantile_rule": QUANTILE_RULE,
        "rng": RNG_ALGORITHM,
    }
    meta.update(metadata or {})
    return SweepReport(tuple(config.lambda_grid), table, meta, weights)


def efficient_frontier(
    kind: str,
    moments: MomentEstimates,
    sets: dict | None = None,
    config: EvalConfig | None = None,
    solver: SolverConfig | None = None,
    lambdas=None,
    eval_moments: MomentEstimates | None = None,
) -> list[FrontierPoint]:
    """One point per risk aversion value, in ascending order of ``lambda``.

    ``sets`` maps ``"box"``/``"ellip"``/``"sep"`` to calibrated sets (only the
    one for ``kind`` is needed). Each solve is warm-started at the previous
    solution, which changes iteration counts but not the optimum.
    """
    config = config or EvalConfig()
    solver = solver or SolverConfig()
    eval_moments = eval_moments or moments
    grid = sorted(float(v) for v in (config.frontier_lambdas if lambdas is None else lambdas))
    if not grid:
        raise ValueError("frontier needs at least one lambda")
    points = []
    start = solver.start
    for lam in grid:
        sol = _solve_checked(ModelSpec.build(kind, moments, lam, sets), replace(solver, start=start))
        ret, risk = portfolio_stats(sol.weights, eval_moments)
        points.append(FrontierPoint(lam, risk, ret, sol.weights))
        start = sol.weights
    return points


def mark_return_at_risk(
    moments: MomentEstimates,
    risk: float,
    solver: SolverConfig | None = None,
    risk_tol: float = 1e-9,
    lam_bounds: tuple[float, float] = (1e-8, 1e8),
) -> float:
    """Return of the Markowitz frontier at the given risk.

    Bisects ``log(lambda)`` until the two bracketing frontier points differ in
    risk by less than ``risk_tol`` and interpolates linearly between them.
    Risks beyond the maximum-return end of the frontier get its return (the
    largest attainable); risks below the minimum-variance end get the
    minimum-variance return.
    """
    solver = solver or SolverConfig()

    def point(lam):
        sol = _solve_checked(ModelSpec.mark(moments.mu_hat, moments.sigma_hat, lam), solver)
        r, s = portfolio_stats(sol.weights, moments)
        return s, r

    lo, hi = math.log(lam_bounds[0]), math.log(lam_bounds[1])
    risk_lo, ret_lo = point(math.exp(lo))   # high-risk end
    risk_hi, ret_hi = point(math.exp(hi))   # low-risk end
    if risk >= risk_lo:
        return ret_lo
    if risk <= risk_hi:
        return ret_hi
    for _ in range(200):
        if risk_lo - risk_hi <= risk_tol:
            break
        mid = 0.5 * (lo + hi)
        s, r = point(math.exp(mid))
        if s >= risk:
            lo, risk_lo, ret_lo = mid, s, r
        else:
            hi, risk_hi, ret_hi = mid, s, r
    if risk_lo == risk_hi:
        return max(ret_lo, ret_hi)
    w = (risk - risk_hi) / (risk_lo - risk_hi)
    return ret_hi + w * (ret_lo - ret_hi)


def interpolate_frontier(points: list[FrontierPoint], risk: float) -> float:
    """Piecewise-linear return of a frontier at ``risk``; flat beyond its ends."""
    pts = sorted((p.risk, p.ret) for p in points)
    risks = np.array([p[0] for p in pts])
    rets = np.maximum.accumulate(np.array([p[1] for p in pts]))
    return float(np.interp(risk, risks, rets))


def frontier_dominance_gap(
    mark_points: list[FrontierPoint],
    other_points: list[FrontierPoint],
    moments: MomentEstimates,
    solver: SolverConfig | None = None,
) -> float:
    """Largest excess of a frontier point's return over the Markowitz frontier.

    The Markowitz frontier is interpolated between ``mark_points``; where a
    point would sit above that chord, the frontier is refined at exactly its
    risk (chords under-estimate a concave frontier). Non-positive values mean
    every point lies on or below the Markowitz frontier.
    """
    gap = -math.inf
    for p in other_points:
        excess = p.ret - interpolate_frontier(mark_points, p.risk)
        if excess > 0:
            excess = p.ret - mark_return_at_risk(moments, p.risk, solver)
        gap = max(gap, excess)
    return gap


def summarize_max_avg_sharpe(reports: list[SweepReport], labels: list[str] | None = None) -> list[dict]:
    """Best average Sharpe ratio over the four models, one row per report."""
    if not reports:
        raise ValueError("need at least one report")
    labels = labels or [r.label or f"report {i + 1}" for i, r in enumerate(reports)]
    rows = []
    for label, report in zip(labels, reports):
        avg = report.average
        best = int(np.argmax(avg))
        rows.append({"label": label, "max_avg_sharpe": float(avg[best]), "model": DISPLAY_NAMES[KINDS[best]]})
    return rows


def format_summary(rows: list[dict]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["scenario", "max_avg_sharpe", "model"])
    for row in rows:
        writer.writerow([row["label"], f"{row['max_avg_sharpe']:.3f}", row["model"]])
    return out.getvalue()


@dataclass
class ExperimentResult:
    report: SweepReport
    frontiers: dict          # kind -> list[FrontierPoint]
    moments: MomentEstimates
    sets: dict               # kind -> calibrated set
    returns: ReturnMatrix


def calibrate_all(returns: ReturnMatrix, config: EvalConfig, bootstrap_seed: int | None = None):
    moments = estimate_moments(returns)
    seed = derive_seed(config.seed, "bootstrap") if bootstrap_seed is None else bootstrap_seed
    sets = {
        "box": calibrate_box(moments, config.alpha),
        "ellip": calibrate_ellipsoid(moments, config.alpha),
        "sep": bootstrap_separable(returns, config.alpha, config.beta, seed, config.workers),
    }
    return moments, sets


def run_experiment(
    dataset: ReturnMatrix | SimulationConfig,
    config: EvalConfig | None = None,
    solver: SolverConfig | None = None,
    label: str = "",
    frontiers: bool = True,
) -> ExperimentResult:
    """Full comparison on one dataset: calibrate, sweep lambda, trace frontiers.

    A :class:`SimulationConfig` is sampled first. The bootstrap seed is derived
    from ``config.seed`` independently of the simulation seed.
    """
    config = config or EvalConfig()
    meta = {"label": label}
    if isinstance(dataset, SimulationConfig):
        meta.update({"source": "simulation", "sample_count": dataset.sample_count,
                     "simulation_seed": dataset.seed})
        returns = simulate_returns(dataset)
    else:
        meta["source"] = "returns"
        returns = dataset

    train, test = returns, None
    if config.holdout_fraction > 0:
        cut = returns.n - max(2, int(round(returns.n * config.holdout_fraction)))
        train = ReturnMatrix(returns.tickers, returns.returns[:cut])
        test = ReturnMatrix(returns.tickers, returns.returns[cut:])
        meta["holdout_rows"] = test.n
    bootstrap_seed = derive_seed(config.seed, "bootstrap")
    meta["bootstrap_seed"] = bootstrap_seed
    moments, sets = calibrate_all(train, config, bootstrap_seed)
    eval_moments = estimate_moments(test) if test is not None else moments
    meta["evaluation"] = "out-of-sample holdout" if test is not None else "in-sample"
    report = lambda_sweep(moments, sets["box"], sets["ellip"], sets["sep"], config, solver,
                          eval_moments=eval_moments, metadata=meta)
    traced = {}
    if frontiers:
        for kind in KINDS:
            traced[kind] = efficient_frontier(kind, moments, sets, config, solver, eval_moments=eval_moments)
    return ExperimentResult(report, traced, moments, sets, returns)


def frontier_csv(frontiers: dict) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["model", "lambda", "risk", "return"])
    for kind, points in frontiers.items():
        for p in points:
            writer.writerow([DISPLAY_NAMES[kind], repr(p.lam), repr(p.risk), repr(p.ret)])
    return out.getvalue()


def run_metadata(result: ExperimentResult, config: EvalConfig, extra: dict | None = None) -> dict:
    meta = dict(result.report.metadata)
    meta.update({
        "lambda_grid": list(config.lambda_grid),
        "frontier_lambdas": list(config.frontier_lambdas),
        "versions": {
            "robust_portfolio": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
    })
    meta.update(extra or {})
    return meta


def write_artifacts(result: ExperimentResult, out_dir, config: EvalConfig, extra_meta: dict | None = None) -> list[str]:
    """Write sweep CSV/JSON, one frontier CSV per model and a metadata JSON."""
    os.makedirs(out_dir, exist_ok=True)
    written = []

    def emit(name, text):
        path = os.path.join(out_dir, name)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        written.append(path)

    meta = run_metadata(result, config, extra_meta)
    result.report.metadata = meta
    emit("sweep.csv", result.report.to_csv())
    emit("sweep.json", json.dumps(result.report.to_dict(), indent=2) + "\n")
    for kind, points in result.frontiers.items():
        emit(f"frontier_{kind}.csv", frontier_csv({kind: points}))
    emit("metadata.json", json.dumps(meta, indent=2) + "\n")
    return written
