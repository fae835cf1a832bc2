"""Exact GP regression for kernel expressions: evidence, fitting, prediction."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize
from scipy.stats import qmc

from .errors import FitFailure, InvalidArgumentError, NumericalFailure
from .grammar import (
    KernelExpr,
    as_points,
    check_theta,
    covariance_from_distances,
    pairwise_distances,
    parse_expr,
    print_expr,
)
from .utils import array_digest

JITTER_LADDER = (0.0, 1e-6, 1e-4, 1e-2)
NOISE_BOUNDS = (1e-6, 1.0)
SCALE_BOUNDS = (1e-2, 1e2)
FAILED_LML = -1e6
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Inputs scaled to [0, 1]^d and outputs standardized, with the raw-scale metadata."""

    X: np.ndarray
    y: np.ndarray
    x_min: np.ndarray
    x_max: np.ndarray
    y_mean: float
    y_std: float
    name: str = ""

    def __post_init__(self):
        if self.X.ndim != 2 or self.X.shape[0] != self.y.shape[0]:
            raise InvalidArgumentError("X must be (n, d) and y length n")
        if self.X.shape[0] < 2:
            raise InvalidArgumentError("a dataset needs at least 2 points")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.y))):
            raise InvalidArgumentError("dataset contains non-finite values")

    @classmethod
    def from_raw(cls, X, y, name: str = "") -> "Dataset":
        X = as_points(X)
        y = np.asarray(y, dtype=float).ravel()
        if X.shape[0] != y.shape[0]:
            raise InvalidArgumentError(f"{X.shape[0]} inputs but {y.shape[0]} outputs")
        if X.shape[0] < 2:
            raise InvalidArgumentError("a dataset needs at least 2 points")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise InvalidArgumentError("dataset contains non-finite values")
        x_min, x_max = X.min(axis=0), X.max(axis=0)
        span = np.where(x_max > x_min, x_max - x_min, 1.0)
        y_mean = float(y.mean())
        y_std = float(y.std())
        if y_std == 0.0:
            y_std = 1.0
        Xn = (X - x_min) / span
        return cls(Xn, (y - y_mean) / y_std, x_min, x_min + span, y_mean, y_std, name)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def normalize_x(self, X_raw) -> np.ndarray:
        return (as_points(X_raw) - self.x_min) / (self.x_max - self.x_min)

    def raw_x(self) -> np.ndarray:
        return self.X * (self.x_max - self.x_min) + self.x_min

    def raw_y(self) -> np.ndarray:
        return self.y * self.y_std + self.y_mean

    def digest(self) -> str:
        return array_digest(np.column_stack([self.X, self.y]))


@dataclass(frozen=True)
class FitBudget:
    restarts: int = 8
    max_evals: int = 200

    def __post_init__(self):
        if self.restarts < 1 or self.max_evals < 1:
            raise InvalidArgumentError("restarts and max_evals must be >= 1")


@dataclass(eq=False)
class FittedGP:
    expr: KernelExpr
    theta: np.ndarray
    scale: float
    noise: float
    lml: float
    chol: np.ndarray
    alpha: np.ndarray
    jitter: float
    X: np.ndarray
    y: np.ndarray
    # LML at each multi-start initial point, kept for diagnostics.
    start_lmls: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "expr": print_expr(self.expr),
            "theta": [float(t) for t in self.theta],
            "scale": float(self.scale),
            "noise": float(self.noise),
            "lml": float(self.lml),
        }

    def recompute_lml(self) -> float:
        n = len(self.y)
        return float(
            -0.5 * self.y @ self.alpha
            - np.sum(np.log(np.diag(self.chol)))
            - 0.5 * n * LOG_2PI
        )


def _cholesky(C: np.ndarray, what: str):
    """Cholesky with the jitter ladder; returns (L, jitter)."""
    n = C.shape[0]
    for jitter in JITTER_LADDER:
        try:
            L = np.linalg.cholesky(C + jitter * np.eye(n) if jitter else C)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.isfinite(L)):
            return L, jitter
    raise NumericalFailure(f"Cholesky failed for {what} after jitter escalation")


def _evidence(K, scale, noise, y, what):
    n = len(y)
    C = scale * K + noise * np.eye(n)
    L, jitter = _cholesky(C, what)
    alpha = cho_solve((L, True), y)
    lml = -0.5 * y @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * n * LOG_2PI
    return float(lml), L, alpha, jitter


def log_marginal_likelihood(expr: KernelExpr, theta, scale: float, noise: float, data: Dataset) -> float:
    """Gaussian evidence of ``data`` under C = scale * K(theta) + noise * I, in nats."""
    theta = check_theta(expr, theta)
    if scale <= 0 or noise <= 0:
        raise InvalidArgumentError("scale and noise must be positive")
    K = covariance_from_distances(expr, theta, pairwise_distances(data.X))
    return _evidence(K, scale, noise, data.y, print_expr(expr))[0]


def _log_bounds(expr: KernelExpr) -> np.ndarray:
    b = np.vstack([expr.bounds(), [SCALE_BOUNDS, NOISE_BOUNDS]])
    return np.log(b)


def _start_points(log_bounds: np.ndarray, count: int, seed: int) -> np.ndarray:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # Sobol balance warning for non powers of 2
        u = qmc.Sobol(len(log_bounds), scramble=True, seed=seed).random(count)
    return log_bounds[:, 0] + u * (log_bounds[:, 1] - log_bounds[:, 0])


def fit_gp(expr: KernelExpr, data: Dataset, budget: FitBudget | None = None, seed: int = 0) -> FittedGP:
    """Maximize the evidence over (theta, scale, noise) in log space.

    Multi-start from scrambled Sobol points, each refined by bounded
    Nelder-Mead with at most ``budget.max_evals`` objective evaluations.
    The arg-best over restarts is returned; ties keep the lowest restart.
    """
    budget = budget or FitBudget()
    r = pairwise_distances(data.X)
    y = data.y
    name = print_expr(expr)
    lb = _log_bounds(expr)
    p = expr.n_params

    def neg_lml(u):
        u = np.clip(u, lb[:, 0], lb[:, 1])
        v = np.exp(u)
        K = covariance_from_distances(expr, v[:p], r)
        try:
            return -_evidence(K, v[p], v[p + 1], y, name)[0]
        except NumericalFailure:
            return np.inf

    best_u, best_f = None, np.inf
    start_lmls = []
    for u0 in _start_points(lb, budget.restarts, seed):
        f0 = neg_lml(u0)
        start_lmls.append(-f0)
        cand_u, cand_f = u0, f0
        if np.isfinite(f0):
            res = minimize(
                neg_lml,
                u0,
                method="Nelder-Mead",
                bounds=lb,
                options={"maxfev": budget.max_evals, "xatol": 1e-7, "fatol": 1e-9},
            )
            if res.fun < cand_f:
                cand_u, cand_f = np.clip(res.x, lb[:, 0], lb[:, 1]), float(res.fun)
        if cand_f < best_f:
            best_u, best_f = cand_u, cand_f
    if best_u is None or not np.isfinite(best_f):
        raise FitFailure(f"all {budget.restarts} restarts failed for {name}")
    v = np.exp(best_u)
    K = covariance_from_distances(expr, v[:p], r)
    lml, L, alpha, jitter = _evidence(K, v[p], v[p + 1], y, name)
    return FittedGP(expr, v[:p], float(v[p]), float(v[p + 1]), lml, L, alpha, jitter, data.X, y, start_lmls)


def gp_from_params(expr: KernelExpr, theta, scale: float, noise: float, data: Dataset) -> FittedGP:
    """Condition a GP with fixed hyperparameters (no fitting)."""
    theta = check_theta(expr, theta)
    K = covariance_from_distances(expr, theta, pairwise_distances(data.X))
    lml, L, alpha, jitter = _evidence(K, scale, noise, data.y, print_expr(expr))
    return FittedGP(expr, theta, float(scale), float(noise), lml, L, alpha, jitter, data.X, data.y)


def fitted_from_json(obj: dict, data: Dataset) -> FittedGP:
    return gp_from_params(parse_expr(obj["expr"]), obj["theta"], obj["scale"], obj["noise"], data)


def posterior_predict(model: FittedGP, Xstar, return_clamped: bool = False):
    """Posterior mean and latent-function variance at ``Xstar`` (normalized units).

    Negative variances from round-off are clamped to zero.
    """
    Xstar = as_points(Xstar)
    Ks = model.scale * covariance_from_distances(
        model.expr, model.theta, pairwise_distances(model.X, Xstar)
    )
    prior_var = model.scale * float(
        covariance_from_distances(model.expr, model.theta, np.zeros((1, 1)))[0, 0]
    )
    mean = Ks.T @ model.alpha
    v = solve_triangular(model.chol, Ks, lower=True)
    var = prior_var - np.sum(v**2, axis=0)
    clamped = int(np.sum(var < 0))
    var = np.maximum(var, 0.0)
    if return_clamped:
        return mean, var, clamped
    return mean, var


class CachedObjective:
    """Evaluates fitted LML per canonical expression, fitting each at most once.

    Failed fits score :data:`FAILED_LML`.
    """

    def __init__(self, data: Dataset, budget: FitBudget | None = None, fit_seed: int = 0):
        self.data = data
        self.budget = budget or FitBudget()
        self.fit_seed = fit_seed
        self.cache: dict[str, float] = {}
        self.models: dict[str, FittedGP | None] = {}
        self.n_fits = 0

    def __call__(self, expr: KernelExpr) -> float:
        key = print_expr(expr)
        if key not in self.cache:
            self.n_fits += 1
            try:
                m = fit_gp(expr, self.data, self.budget, self.fit_seed)
                self.cache[key], self.models[key] = m.lml, m
            except FitFailure:
                self.cache[key], self.models[key] = FAILED_LML, None
        return self.cache[key]
