"""Price ingestion, log returns and seeded multivariate-normal return samples."""

from __future__ import annotations

import csv
import datetime as dt
import io
import math
from dataclasses import dataclass, field

import numpy as np

RNG_ALGORITHM = "numpy PCG64 seeded through SeedSequence"


class DataError(ValueError):
    """Raised when input data violates a table invariant."""


class InsufficientDataError(DataError):
    pass


class NotPositiveSemidefiniteError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class PriceTable:
    dates: tuple[dt.date, ...]
    tickers: tuple[str, ...]
    prices: np.ndarray

    def __post_init__(self):
        prices = np.asarray(self.prices, dtype=float)
        if prices.ndim != 2 or prices.shape != (len(self.dates), len(self.tickers)):
            raise DataError(
                f"price matrix shape {prices.shape} does not match "
                f"{len(self.dates)} dates x {len(self.tickers)} tickers"
            )
        if any(b <= a for a, b in zip(self.dates, self.dates[1:])):
            raise DataError("dates must be strictly ascending")
        if not np.all(np.isfinite(prices)) or np.any(prices <= 0):
            raise DataError("prices must be finite and strictly positive")
        object.__setattr__(self, "prices", prices)


@dataclass(frozen=True)
class ReturnMatrix:
    """``n x N`` per-period log returns, optionally labelled by period end date."""

    tickers: tuple[str, ...]
    returns: np.ndarray
    dates: tuple[dt.date, ...] | None = None

    def __post_init__(self):
        r = np.asarray(self.returns, dtype=float)
        if r.ndim != 2 or r.shape[1] != len(self.tickers):
            raise DataError(f"return matrix shape {r.shape} does not match {len(self.tickers)} tickers")
        if r.shape[0] < 2:
            raise InsufficientDataError(f"need at least 2 return rows, got {r.shape[0]}")
        if not np.all(np.isfinite(r)):
            raise DataError("returns must be finite")
        if self.dates is not None and len(self.dates) != r.shape[0]:
            raise DataError("dates and return rows differ in length")
        object.__setattr__(self, "returns", r)

    @property
    def n(self) -> int:
        return self.returns.shape[0]

    @property
    def n_assets(self) -> int:
        return self.returns.shape[1]

    @classmethod
    def from_array(cls, returns, tickers=None) -> "ReturnMatrix":
        returns = np.atleast_2d(np.asarray(returns, dtype=float))
        if tickers is None:
            tickers = tuple(f"A{i + 1}" for i in range(returns.shape[1]))
        return cls(tuple(tickers), returns)


@dataclass(frozen=True)
class SimulationConfig:
    mean: np.ndarray
    covariance: np.ndarray
    sample_count: int
    seed: int = 0
    jitter: float | None = None
    tickers: tuple[str, ...] | None = field(default=None)

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise DataError(f"covariance shape {cov.shape} does not match mean of length {mean.size}")
        if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(cov).max())):
            raise DataError("covariance must be symmetric")
        if int(self.sample_count) < 1:
            raise DataError("sample_count must be >= 1")
        if self.jitter is not None and self.jitter < 0:
            raise DataError("jitter must be nonnegative")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "sample_count", int(self.sample_count))


def _locate(row: int, col: int, header: list[str]) -> str:
    name = header[col] if col < len(header) else f"#{col + 1}"
    return f"row {row}, column {col + 1} ({name})"


def parse_price_table(csv_text: str, forward_fill: bool = False) -> PriceTable:
    """Parse ``date,<ticker1>,...`` CSV text into a validated :class:`PriceTable`.

    Rows are sorted by date. Empty cells are rejected unless ``forward_fill``
    is set, in which case they take the previous row's price (a leading empty
    cell is still an error). Row numbers in error messages are 1-based file
    lines, header included.
    """
    reader = csv.reader(io.StringIO(csv_text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DataError("empty CSV input") from None
    if len(header) < 2:
        raise DataError("header must contain a date column and at least one ticker")
    tickers = tuple(header[1:])
    if len(set(tickers)) != len(tickers):
        raise DataError("duplicate ticker in header")

    rows: list[tuple[dt.date, list[float | None], int]] = []
    seen: dict[dt.date, int] = {}
    for lineno, raw in enumerate(reader, start=2):
        if not raw or all(not cell.strip() for cell in raw):
            continue
        if len(raw) != len(header):
            raise DataError(f"ragged row {lineno}: expected {len(header)} cells, got {len(raw)}")
        try:
            day = dt.date.fromisoformat(raw[0].strip())
        except ValueError:
            raise DataError(f"malformed date {raw[0]!r} at {_locate(lineno, 0, header)}") from None
        if day in seen:
            raise DataError(f"duplicate date {day} at row {lineno} (first seen at row {seen[day]})")
        seen[day] = lineno
        values: list[float | None] = []
        for col, cell in enumerate(raw[1:], start=1):
            cell = cell.strip()
            if not cell:
                if not forward_fill:
                    raise DataError(f"missing price at {_locate(lineno, col, header)}")
                values.append(None)
                continue
            try:
                value = float(cell)
            except ValueError:
                raise DataError(f"malformed number {cell!r} at {_locate(lineno, col, header)}") from None
            if not math.isfinite(value) or value <= 0:
                raise DataError(f"non-positive price {cell!r} at {_locate(lineno, col, header)}")
            values.append(value)
        rows.append((day, values, lineno))

    if not rows:
        raise DataError("CSV contains no data rows")
    rows.sort(key=lambda item: item[0])
    prices = np.empty((len(rows), len(tickers)))
    for t, (_, values, lineno) in enumerate(rows):
        for i, value in enumerate(values):
            if value is None:
                if t == 0:
                    raise DataError(f"cannot forward-fill leading gap at {_locate(lineno, i + 1, header)}")
                value = prices[t - 1, i]
            prices[t, i] = value
    return PriceTable(tuple(day for day, _, _ in rows), tickers, prices)


def compute_log_returns(prices: PriceTable) -> ReturnMatrix:
    if prices.prices.shape[0] < 3:
        raise InsufficientDataError(f"need at least 3 price rows, got {prices.prices.shape[0]}")
    returns = np.log(prices.prices[1:] / prices.prices[:-1])
    return ReturnMatrix(prices.tickers, returns, prices.dates[1:])


def parse_return_table(csv_text: str) -> ReturnMatrix:
    """Read a return CSV in the same layout as prices (any finite values allowed)."""
    reader = csv.reader(io.StringIO(csv_text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DataError("empty CSV input") from None
    dates, rows = [], []
    for lineno, raw in enumerate(reader, start=2):
        if not raw or all(not cell.strip() for cell in raw):
            continue
        if len(raw) != len(header):
            raise DataError(f"ragged row {lineno}: expected {len(header)} cells, got {len(raw)}")
        try:
            dates.append(dt.date.fromisoformat(raw[0].strip()))
        except ValueError:
            raise DataError(f"malformed date {raw[0]!r} at {_locate(lineno, 0, header)}") from None
        row = []
        for col, cell in enumerate(raw[1:], start=1):
            try:
                value = float(cell)
            except ValueError:
                raise DataError(f"malformed number {cell!r} at {_locate(lineno, col, header)}") from None
            if not math.isfinite(value):
                raise DataError(f"non-finite return at {_locate(lineno, col, header)}")
            row.append(value)
        rows.append(row)
    if len(set(dates)) != len(dates):
        raise DataError("duplicate date in return table")
    order = sorted(range(len(dates)), key=dates.__getitem__)
    return ReturnMatrix(
        tuple(header[1:]),
        np.array([rows[k] for k in order], dtype=float).reshape(len(rows), len(header) - 1),
        tuple(dates[k] for k in order),
    )


def format_return_table(returns: ReturnMatrix) -> str:
    """Serialize returns as CSV; undated matrices get consecutive period numbers."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["date", *returns.tickers])
    if returns.dates is not None:
        labels = [d.isoformat() for d in returns.dates]
    else:
        start = dt.date(2000, 1, 1)
        labels = [(start + dt.timedelta(days=t)).isoformat() for t in range(returns.n)]
    for label, row in zip(labels, returns.returns):
        writer.writerow([label, *(repr(float(v)) for v in row)])
    return out.getvalue()


def default_jitter(covariance: np.ndarray) -> float:
    scale = float(np.max(np.diag(covariance))) if covariance.size else 0.0
    return 1e-10 * scale if scale > 0 else 1e-10


def covariance_factor(covariance: np.ndarray, jitter: float | None = None) -> np.ndarray:
    """Lower-triangular ``L`` with ``L @ L.T`` equal to the (jittered) covariance.

    A zero matrix factors to zero. Otherwise plain Cholesky is tried first and
    the jitter is added to the diagonal only if that fails.
    """
    cov = np.asarray(covariance, dtype=float)
    if not np.any(cov):
        return np.zeros_like(cov)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    eps = default_jitter(cov) if jitter is None else jitter
    try:
        return np.linalg.cholesky(cov + eps * np.eye(cov.shape[0]))
    except np.linalg.LinAlgError:
        raise NotPositiveSemidefiniteError(
            f"covariance is not positive semidefinite (Cholesky failed with jitter {eps:g})"
        ) from None


def simulate_returns(config: SimulationConfig) -> ReturnMatrix:
    if config.sample_count < 2:
        raise InsufficientDataError("sample_count must be >= 2 to form a ReturnMatrix")
    factor = covariance_factor(config.covariance, config.jitter)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(config.seed)))
    z = rng.standard_normal((config.sample_count, config.mean.size))
    samples = config.mean + z @ factor.T
    tickers = config.tickers or tuple(f"A{i + 1}" for i in range(config.mean.size))
    return ReturnMatrix(tuple(tickers), samples)


def make_ground_truth(n_assets: int, seed: int = 0, history: int | None = 193) -> tuple[np.ndarray, np.ndarray]:
    """Plausible daily (mean, covariance) for ``n_assets`` stocks.

    Returns follow one market factor (about 1% daily volatility) plus 1-2.5%
    idiosyncratic noise, with expected returns spread around 0.05% per day.
    With ``history`` set, the result is the sample moments of that many
    simulated days, which carries the mean dispersion of moments estimated
    from a short market window. ``history=None`` gives the factor model itself.
    """
    ss = np.random.SeedSequence([int(seed), 0x6D61726B])
    param_seq, hist_seq = ss.spawn(2)
    rng = np.random.Generator(np.random.PCG64(param_seq))
    beta = rng.uniform(0.5, 1.5, n_assets)
    idio = rng.uniform(0.01, 0.025, n_assets)
    cov = 0.01**2 * np.outer(beta, beta) + np.diag(idio**2)
    cov = 0.5 * (cov + cov.T)
    mean = 0.0005 + 0.3 * beta * 0.001 + rng.normal(0.0, 0.0006, n_assets)
    if history is None:
        return mean, cov
    z = np.random.Generator(np.random.PCG64(hist_seq)).standard_normal((history, n_assets))
    sample = mean + z @ np.linalg.cholesky(cov).T
    mu = sample.mean(axis=0)
    centered = sample - mu
    est = centered.T @ centered / history
    return mu, 0.5 * (est + est.T)
