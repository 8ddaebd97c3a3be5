"""Long-only maximization of the Markowitz and worst-case robust objectives.

All four models share the shape

    maximize  c'x - lam * x'Q x - kappa * sqrt(x' A x)   over  {x >= 0, 1'x = 1}

with ``kappa = 0`` except for the ellipsoidal model. The solver alternates a
projected-gradient ascent step (Armijo backtracking, which alone guarantees
convergence) with a Newton step restricted to the face spanned by the current
support. On a correctly identified face the Newton step is exact for the
quadratic models, so KKT residuals reach rounding level in a handful of
iterations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .estimation import BoxSet, EllipsoidSet, MomentEstimates, SeparableSet

KINDS = ("mark", "box", "ellip", "sep")
DISPLAY_NAMES = {"mark": "Mark", "box": "Box", "ellip": "Ellip", "sep": "Sep"}

SOC_EPS = 1e-12        # sqrt(x'Ax) at or below this uses the zero subgradient
ACTIVE_THRESHOLD = 1e-9
SIMPLEX_TOL = 1e-8
ARMIJO = 1e-4


class SolverError(RuntimeError):
    pass


class NumericalError(SolverError):
    """NaN or Inf met during the iteration; ``last_iterate`` is the last finite point."""

    def __init__(self, message: str, last_iterate: np.ndarray):
        super().__init__(message)
        self.last_iterate = last_iterate


@dataclass(frozen=True)
class ModelSpec:
    """One objective instance.

    ``mu`` and ``sigma`` are the mean vector and covariance entering the
    objective; for ``sep`` they are the worst-case mean lower bound and
    covariance upper bound. ``uncertainty`` is the calibrated set of the
    matching kind (``None`` for ``mark``).
    """

    kind: str
    mu: np.ndarray
    sigma: np.ndarray
    lam: float
    uncertainty: BoxSet | EllipsoidSet | SeparableSet | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        if sigma.shape != (mu.size, mu.size):
            raise ValueError(f"sigma shape {sigma.shape} does not match mu of length {mu.size}")
        if not (self.lam > 0 and math.isfinite(self.lam)):
            raise ValueError(f"risk aversion must be positive, got {self.lam}")
        expected = {"mark": type(None), "box": BoxSet, "ellip": EllipsoidSet, "sep": SeparableSet}[self.kind]
        if not isinstance(self.uncertainty, expected):
            raise TypeError(f"{self.kind} model needs uncertainty of type {expected.__name__}")
        if self.kind == "box" and np.shape(self.uncertainty.delta) != mu.shape:
            raise ValueError("box delta has the wrong length")
        if self.kind == "ellip" and np.shape(self.uncertainty.sigma_mu) != sigma.shape:
            raise ValueError("ellipsoid sigma_mu has the wrong shape")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "lam", float(self.lam))

    @property
    def n_assets(self) -> int:
        return self.mu.size

    @classmethod
    def mark(cls, mu, sigma, lam: float) -> "ModelSpec":
        return cls("mark", mu, sigma, lam)

    @classmethod
    def box(cls, mu, sigma, lam: float, box: BoxSet) -> "ModelSpec":
        return cls("box", mu, sigma, lam, box)

    @classmethod
    def ellip(cls, mu, sigma, lam: float, ellipsoid: EllipsoidSet) -> "ModelSpec":
        return cls("ellip", mu, sigma, lam, ellipsoid)

    @classmethod
    def sep(cls, lam: float, separable: SeparableSet) -> "ModelSpec":
        return cls("sep", separable.mu_lo, separable.sigma_hi, lam, separable)

    @classmethod
    def build(cls, kind: str, moments: MomentEstimates, lam: float, sets: dict | None = None) -> "ModelSpec":
        """Model of ``kind`` on point estimates; ``sets`` maps kind to its calibrated set."""
        sets = sets or {}
        if kind == "mark":
            return cls.mark(moments.mu_hat, moments.sigma_hat, lam)
        if kind == "sep":
            return cls.sep(lam, sets["sep"])
        if kind not in KINDS:
            raise ValueError(f"unknown model kind {kind!r}; expected one of {KINDS}")
        return cls(kind, moments.mu_hat, moments.sigma_hat, lam, sets[kind])

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "lambda": self.lam, "mu": self.mu.tolist(), "sigma": self.sigma.tolist()}
        if self.uncertainty is not None:
            d["set"] = self.uncertainty.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        parse = {"box": BoxSet, "ellip": EllipsoidSet, "sep": SeparableSet}
        unc = parse[d["kind"]].from_dict(d["set"]) if d["kind"] in parse else None
        return cls(d["kind"], np.asarray(d["mu"], float), np.asarray(d["sigma"], float), float(d["lambda"]), unc)


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 200_000
    tolerance: float = 1e-8
    step_rule: str = "armijo"   # or "diminishing": trial steps c / sqrt(k)
    start: np.ndarray | None = None  # None means uniform weights
    newton_polish: bool = True

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.step_rule not in ("armijo", "diminishing"):
            raise ValueError(f"unknown step rule {self.step_rule!r}")


@dataclass(frozen=True)
class PortfolioSolution:
    weights: np.ndarray
    objective: float
    iterations: int
    kkt_residual: float
    converged: bool = True
    history: tuple[float, ...] = field(default=(), repr=False, compare=False)

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "objective": self.objective,
            "iterations": self.iterations,
            "kkt_residual": self.kkt_residual,
            "converged": self.converged,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PortfolioSolution":
        return cls(np.asarray(d["weights"], float), float(d["objective"]), int(d["iterations"]),
                   float(d["kkt_residual"]), bool(d.get("converged", True)))


class _Objective:
    """Smooth pieces of a model on the nonnegative orthant."""

    def __init__(self, model: ModelSpec):
        self.lam = model.lam
        self.Q = model.sigma
        self.kappa = 0.0
        self.A = None
        if model.kind == "box":
            # on x >= 0, delta'|x| = delta'x
            self.c = model.mu - np.asarray(model.uncertainty.delta, float)
        else:
            self.c = model.mu
        if model.kind == "ellip" and model.uncertainty.delta_sq > 0:
            self.kappa = math.sqrt(model.uncertainty.delta_sq)
            self.A = np.asarray(model.uncertainty.sigma_mu, float)

    def _soc(self, x):
        if self.A is None:
            return None, 0.0
        Ax = self.A @ x
        return Ax, math.sqrt(max(float(x @ Ax), 0.0))

    def value(self, x) -> float:
        v = float(self.c @ x - self.lam * (x @ (self.Q @ x)))
        if self.A is not None:
            v -= self.kappa * self._soc(x)[1]
        return v

    def gradient(self, x) -> np.ndarray:
        g = self.c - 2.0 * self.lam * (self.Q @ x)
        if self.A is not None:
            Ax, s = self._soc(x)
            if s > SOC_EPS:
                g = g - self.kappa * Ax / s
        return g

    def hessian(self, x, idx) -> np.ndarray:
        H = -2.0 * self.lam * self.Q[np.ix_(idx, idx)]
        if self.A is not None:
            Ax, s = self._soc(x)
            if s > SOC_EPS:
                a = Ax[idx]
                H = H - self.kappa * (self.A[np.ix_(idx, idx)] / s - np.outer(a, a) / s**3)
        return H


def _check_point(model: ModelSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (model.n_assets,):
        raise ValueError(f"weight vector of shape {x.shape} does not match {model.n_assets} assets")
    return x


def objective_value(model: ModelSpec, x) -> float:
    x = _check_point(model, x)
    value = float(model.mu @ x - model.lam * (x @ (model.sigma @ x)))
    if model.kind == "box":
        value -= float(np.asarray(model.uncertainty.delta) @ np.abs(x))
    elif model.kind == "ellip":
        q = float(x @ (model.uncertainty.sigma_mu @ x))
        value -= math.sqrt(model.uncertainty.delta_sq) * math.sqrt(max(q, 0.0))
    return value


def objective_subgradient(model: ModelSpec, x) -> np.ndarray:
    """Gradient of :func:`objective_value` on the nonnegative orthant.

    The box penalty uses the ``x >= 0`` branch of ``|x|``; the ellipsoidal
    norm term contributes zero where ``sqrt(x' Sigma_mu x) <= 1e-12``.
    """
    return _Objective(model).gradient(_check_point(model, x))


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto ``{x >= 0, sum(x) = 1}`` by sort and threshold."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    theta = css[rho] / (rho + 1)
    return np.maximum(v - theta, 0.0)


def _kkt(g: np.ndarray, x: np.ndarray) -> float:
    support = x > ACTIVE_THRESHOLD
    if not support.any():
        support = x >= x.max()
    nu = g[support].max()
    outside = max(0.0, float(np.max(g - nu)))
    inside = float(np.max(np.abs(g[support] - nu)))
    return max(outside, inside)


def kkt_residual(model: ModelSpec, x) -> float:
    """First-order optimality violation on the simplex; zero at a maximizer.

    With ``nu`` the largest gradient entry over the support, this is the
    larger of the spread of the gradient over the support and the excess of
    any gradient entry above ``nu``.
    """
    x = _check_point(model, x)
    return _kkt(_Objective(model).gradient(x), x)


def _renormalize(z: np.ndarray) -> np.ndarray:
    z = np.maximum(z, 0.0)
    return z / z.sum()


def _gradient_step(obj: _Objective, x, fx, g, t):
    """Backtracking projected-gradient step; returns (point, value, step) or None."""
    for _ in range(60):
        y = project_simplex(x + t * g)
        gain = float(g @ (y - x))
        if gain <= 0.0:
            return None
        fy = obj.value(y)
        if fy >= fx + ARMIJO * gain:
            return y, fy, t
        t *= 0.5
    return None


def _round_off(fx: float) -> float:
    # objective changes below this are indistinguishable from rounding (and stay within
    # the 1e-12 per-step slack allowed for the ascent sequence)
    return min(1e-12, 64 * np.finfo(float).eps * max(1.0, abs(fx)))


def _newton_step(obj: _Objective, x, fx, g):
    """Newton step on the face ``{z : z_i = 0 where x_i = 0, 1'z = 1}``.

    Near the optimum the predicted gain drops below rounding, so a full step
    is also taken when the objective holds within rounding and the KKT
    residual falls.
    """
    idx = np.flatnonzero(x > 0.0)
    m = idx.size
    if m < 2:
        return None
    H = obj.hessian(x, idx)
    K = np.zeros((m + 1, m + 1))
    K[:m, :m] = H
    K[:m, m] = 1.0
    K[m, :m] = 1.0
    rhs = np.concatenate([-g[idx], [0.0]])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    d = sol[:m]
    d -= d.mean()  # keep the step exactly inside the affine hull
    if not np.all(np.isfinite(d)):
        return None
    slope = float(g[idx] @ d)
    if slope <= 0.0:
        return None
    neg = d < 0
    t_max = float(np.min(-x[idx][neg] / d[neg])) if neg.any() else math.inf
    t = min(1.0, t_max)
    if t == 1.0:
        z = x.copy()
        z[idx] = x[idx] + d
        z = _renormalize(z)
        fz = obj.value(z)
        if fz >= fx - _round_off(fx) and _kkt(obj.gradient(z), z) < _kkt(g, x):
            return z, fz
    for _ in range(40):
        z = x.copy()
        z[idx] = x[idx] + t * d
        if t == t_max:
            z[idx[neg][np.argmin(-x[idx][neg] / d[neg])]] = 0.0
        z = _renormalize(z)
        fz = obj.value(z)
        if fz >= fx + ARMIJO * t * slope:
            return z, fz
        t *= 0.5
    return None


def _start_point(model: ModelSpec, config: SolverConfig) -> np.ndarray:
    N = model.n_assets
    if config.start is None:
        return np.full(N, 1.0 / N)
    x = np.asarray(config.start, dtype=float)
    if x.shape != (N,) or np.any(x < -SIMPLEX_TOL) or abs(x.sum() - 1.0) > SIMPLEX_TOL:
        raise ValueError("start vector must lie on the simplex")
    return _renormalize(x)


def solve(model: ModelSpec, config: SolverConfig | None = None) -> PortfolioSolution:
    """Maximize the model objective over the long-only simplex.

    Returns the final iterate with ``converged=False`` when the KKT residual
    is still above ``config.tolerance`` after ``max_iterations`` steps, or when
    no further ascent is numerically possible.
    """
    config = config or SolverConfig()
    obj = _Objective(model)
    x = _start_point(model, config)
    fx = obj.value(x)
    if not math.isfinite(fx):
        raise NumericalError("objective is not finite at the start point", x)
    history = [fx]
    g = obj.gradient(x)
    spread = float(g.max() - g.min())
    c = 1.0 / spread if spread > 0 else 1.0
    t = c
    residual = _kkt(g, x)
    k = 0
    stalled = 0
    while residual > config.tolerance and k < config.max_iterations:
        k += 1
        f_before, r_before = fx, residual
        trial = c / math.sqrt(k) if config.step_rule == "diminishing" else 2.0 * t
        step = _gradient_step(obj, x, fx, g, trial)
        if step is not None:
            x, fx, t = step
            history.append(fx)
            g = obj.gradient(x)
        if config.newton_polish:
            polish = _newton_step(obj, x, fx, g)
            if polish is not None:
                x, fx = polish
                history.append(fx)
                g = obj.gradient(x)
        if not (math.isfinite(fx) and np.all(np.isfinite(g))):
            raise NumericalError(f"non-finite objective or gradient at iteration {k}", x)
        residual = _kkt(g, x)
        # give up once neither the objective nor the residual moves measurably
        if fx - f_before <= _round_off(fx) and residual >= 0.5 * r_before:
            stalled += 1
            if stalled >= 50:
                break
        else:
            stalled = 0
    return PortfolioSolution(
        weights=x,
        objective=objective_value(model, x),
        iterations=k,
        kkt_residual=residual,
        converged=residual <= config.tolerance,
        history=tuple(history),
    )
