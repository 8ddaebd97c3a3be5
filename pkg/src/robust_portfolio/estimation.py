"""Moment estimates and calibration of the box, ellipsoidal and separable sets."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import special

from .market_data import InsufficientDataError, ReturnMatrix

SIGMA_MU_CONVENTION = "Sigma_mu = Sigma_hat / n (covariance of the sample mean)"
COVARIANCE_CONVENTION = "maximum likelihood (divisor n)"
QUANTILE_RULE = "nearest rank: k = ceil(p * beta) on ascending resample values"

# Resamples are processed in fixed-size blocks so that results do not depend on
# how many workers share the blocks.
BOOTSTRAP_BLOCK = 500


def _as_list(a):
    return np.asarray(a, dtype=float).tolist()


@dataclass(frozen=True)
class MomentEstimates:
    mu_hat: np.ndarray
    sigma_hat: np.ndarray
    n: int

    @property
    def per_asset_std(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.sigma_hat), 0.0, None))

    @property
    def n_assets(self) -> int:
        return self.mu_hat.size


@dataclass(frozen=True)
class BoxSet:
    delta: np.ndarray
    alpha: float

    def to_dict(self) -> dict:
        return {"kind": "box", "alpha": self.alpha, "delta": _as_list(self.delta)}

    @classmethod
    def from_dict(cls, d: dict) -> "BoxSet":
        return cls(np.asarray(d["delta"], dtype=float), float(d["alpha"]))


@dataclass(frozen=True)
class EllipsoidSet:
    delta_sq: float
    sigma_mu: np.ndarray
    alpha: float

    @property
    def radius(self) -> float:
        return math.sqrt(self.delta_sq)

    def to_dict(self) -> dict:
        return {
            "kind": "ellipsoid",
            "alpha": self.alpha,
            "delta_sq": self.delta_sq,
            "sigma_mu": _as_list(self.sigma_mu),
            "sigma_mu_convention": SIGMA_MU_CONVENTION,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EllipsoidSet":
        return cls(float(d["delta_sq"]), np.asarray(d["sigma_mu"], dtype=float), float(d["alpha"]))


@dataclass(frozen=True)
class SeparableSet:
    mu_lo: np.ndarray
    mu_hi: np.ndarray
    sigma_lo: np.ndarray
    sigma_hi: np.ndarray
    alpha: float
    beta: int
    seed: int

    def to_dict(self) -> dict:
        return {
            "kind": "separable",
            "alpha": self.alpha,
            "beta": self.beta,
            "seed": self.seed,
            "quantile_rule": QUANTILE_RULE,
            "mu_lo": _as_list(self.mu_lo),
            "mu_hi": _as_list(self.mu_hi),
            "sigma_lo": _as_list(self.sigma_lo),
            "sigma_hi": _as_list(self.sigma_hi),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SeparableSet":
        arr = lambda key: np.asarray(d[key], dtype=float)  # noqa: E731
        return cls(arr("mu_lo"), arr("mu_hi"), arr("sigma_lo"), arr("sigma_hi"),
                   float(d["alpha"]), int(d["beta"]), int(d["seed"]))


def estimate_moments(returns: ReturnMatrix | np.ndarray) -> MomentEstimates:
    """Sample mean and maximum-likelihood (divisor ``n``) covariance."""
    r = returns.returns if isinstance(returns, ReturnMatrix) else np.atleast_2d(np.asarray(returns, float))
    n = r.shape[0]
    if n < 2:
        raise InsufficientDataError(f"need at least 2 observations, got {n}")
    mu = r.mean(axis=0)
    centered = r - mu
    sigma = centered.T @ centered / n
    return MomentEstimates(mu, 0.5 * (sigma + sigma.T), n)


def normal_quantile(p: float) -> float:
    if not 0.0 < p < 1.0:
        raise ValueError(f"probability must lie in (0, 1), got {p}")
    return float(special.ndtri(p))


def chi_square_quantile(df: int, p: float) -> float:
    if int(df) != df or df < 1:
        raise ValueError(f"degrees of freedom must be a positive integer, got {df}")
    if not 0.0 < p < 1.0:
        raise ValueError(f"probability must lie in (0, 1), got {p}")
    # chi2_df quantile = 2 * Gamma(df/2, 1) quantile
    return float(2.0 * special.gammaincinv(df / 2.0, p))


def calibrate_box(moments: MomentEstimates, alpha: float) -> BoxSet:
    z = normal_quantile(1.0 - alpha / 2.0)
    return BoxSet(moments.per_asset_std * z / math.sqrt(moments.n), float(alpha))


def calibrate_ellipsoid(moments: MomentEstimates, alpha: float) -> EllipsoidSet:
    delta_sq = chi_square_quantile(moments.n_assets, 1.0 - alpha)
    return EllipsoidSet(delta_sq, moments.sigma_hat / moments.n, float(alpha))


def nearest_psd(matrix, floor: float = 0.0) -> np.ndarray:
    """Clip the eigenvalues of a symmetric matrix from below at ``floor``.

    Matrices whose spectrum already clears the floor are returned unchanged,
    which makes the repair exactly idempotent.
    """
    a = np.asarray(matrix, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if floor < 0:
        raise ValueError("floor must be nonnegative")
    scale = max(1.0, float(np.abs(a).max())) if a.size else 1.0
    if not np.allclose(a, a.T, rtol=0.0, atol=1e-10 * scale):
        raise ValueError("matrix is not symmetric")
    a = 0.5 * (a + a.T)
    w, v = np.linalg.eigh(a)
    if w.size == 0 or w.min() >= floor:
        return a
    clipped = (v * np.maximum(w, floor)) @ v.T
    return 0.5 * (clipped + clipped.T)


def nearest_rank(p: float, count: int) -> int:
    """1-based order statistic used as the ``p`` quantile of ``count`` values."""
    # guard against p * count landing a hair above an integer
    return min(count, max(1, math.ceil(p * count - 1e-9)))


def resample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(index)])))


def _bootstrap_block(centered, products, iu, seed: int, start: int, stop: int):
    n = centered.shape[0]
    counts = np.empty((stop - start, n))
    for row, b in enumerate(range(start, stop)):
        idx = resample_rng(seed, b).integers(0, n, size=n)
        counts[row] = np.bincount(idx, minlength=n)
    shift = counts @ centered / n
    cov = counts @ products / n - shift[:, iu[0]] * shift[:, iu[1]]
    return shift, cov


def _bootstrap_packed(returns: ReturnMatrix, beta: int, seed: int, workers: int):
    r = returns.returns
    n, N = r.shape
    iu = np.triu_indices(N)
    mu_hat = r.mean(axis=0)
    # centring makes a constant sample resample to exactly zero covariance
    centered = r - mu_hat
    products = centered[:, iu[0]] * centered[:, iu[1]]
    blocks = [(s, min(s + BOOTSTRAP_BLOCK, beta)) for s in range(0, beta, BOOTSTRAP_BLOCK)]
    run = lambda blk: _bootstrap_block(centered, products, iu, seed, *blk)  # noqa: E731
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, blocks))
    else:
        parts = [run(blk) for blk in blocks]
    mus = mu_hat + np.concatenate([p[0] for p in parts])
    packed = np.concatenate([p[1] for p in parts])
    return mus, packed, iu


def _unpack(values: np.ndarray, iu, N: int) -> np.ndarray:
    out = np.zeros((N, N))
    out[iu] = values
    out[(iu[1], iu[0])] = values
    return out


def bootstrap_resamples(returns: ReturnMatrix, beta: int, seed: int, workers: int = 1):
    """Mean and MLE covariance of ``beta`` row resamples.

    Resample ``b`` draws its rows from a generator seeded by ``(seed, b)``, so
    the output is identical for any ``workers``. Returns ``(mus, sigmas)`` with
    shapes ``(beta, N)`` and ``(beta, N, N)``.
    """
    mus, packed, iu = _bootstrap_packed(returns, beta, seed, workers)
    N = returns.n_assets
    sigmas = np.zeros((beta, N, N))
    sigmas[:, iu[0], iu[1]] = packed
    sigmas[:, iu[1], iu[0]] = packed
    return mus, sigmas


def bootstrap_separable(
    returns: ReturnMatrix, alpha: float, beta: int = 8000, seed: int = 0, workers: int = 1
) -> SeparableSet:
    """Separable mean/covariance bounds from a nonparametric bootstrap.

    Bounds are elementwise nearest-rank ``alpha/2`` and ``1 - alpha/2``
    quantiles of the resampled means and covariances. The covariance upper
    bound is then repaired to the nearest PSD matrix (eigenvalue floor 0).
    """
    if returns.n < 2:
        raise InsufficientDataError("bootstrap needs at least 2 observations")
    if beta < 100:
        raise ValueError(f"beta must be >= 100, got {beta}")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    mus, packed, iu = _bootstrap_packed(returns, beta, seed, workers)
    lo = nearest_rank(alpha / 2.0, beta) - 1
    hi = nearest_rank(1.0 - alpha / 2.0, beta) - 1
    mus.partition((lo, hi), axis=0)
    packed.partition((lo, hi), axis=0)
    N = returns.n_assets
    return SeparableSet(
        mu_lo=mus[lo].copy(),
        mu_hi=mus[hi].copy(),
        sigma_lo=_unpack(packed[lo], iu, N),
        sigma_hi=nearest_psd(_unpack(packed[hi], iu, N), 0.0),
        alpha=float(alpha),
        beta=int(beta),
        seed=int(seed),
    )


def save_calibration(path, box: BoxSet, ellipsoid: EllipsoidSet, separable: SeparableSet,
                     moments: MomentEstimates | None = None) -> None:
    doc = {"box": box.to_dict(), "ellipsoid": ellipsoid.to_dict(), "separable": separable.to_dict()}
    if moments is not None:
        doc["moments"] = {"n": moments.n, "mu_hat": _as_list(moments.mu_hat),
                          "sigma_hat": _as_list(moments.sigma_hat)}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)


def load_calibration(path):
    """Inverse of :func:`save_calibration`; moments are ``None`` if absent."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    moments = None
    if "moments" in doc:
        m = doc["moments"]
        moments = MomentEstimates(np.asarray(m["mu_hat"], float), np.asarray(m["sigma_hat"], float), int(m["n"]))
    return (BoxSet.from_dict(doc["box"]), EllipsoidSet.from_dict(doc["ellipsoid"]),
            SeparableSet.from_dict(doc["separable"]), moments)
