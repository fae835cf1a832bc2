"""Bayesian optimization over embedded kernel coordinates.

The surrogate is a GP over MDS coordinates (single RBF or a simplex-weighted
mixture of RBFs). Acquisition is expected improvement, maximized in the
continuous embedding and snapped to the nearest unevaluated library member.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize
from scipy.spatial.distance import cdist
from scipy.stats import norm, qmc

from .errors import ExhaustedLibraryError, InvalidArgumentError, NumericalFailure
from .gp import FAILED_LML, CachedObjective, Dataset, FitBudget, _cholesky
from .grammar import print_expr

METHODS = ("bo_rbf", "bo_multiscale", "random", "ga")
MODES = ("continuous_snap", "discrete_argmax")
LOGIT_BOUND = 5.0


@dataclass(frozen=True)
class SurrogateConfig:
    kind: str = "multiscale"
    M: int = 3
    variance_bounds: tuple = (1e-2, 1e1)
    lengthscale_bounds: tuple = (1e-2, 1e1)
    noise_bounds: tuple = (1e-6, 1e-1)
    restarts: int = 8
    max_evals: int = 200

    def __post_init__(self):
        if self.kind not in ("rbf", "multiscale"):
            raise InvalidArgumentError(f"unknown surrogate kind {self.kind!r}")
        if self.M < 1:
            raise InvalidArgumentError("M must be >= 1")
        for lo, hi in (self.variance_bounds, self.lengthscale_bounds, self.noise_bounds):
            if not 0 < lo < hi:
                raise InvalidArgumentError("surrogate bounds must be positive and ordered")

    @property
    def components(self) -> int:
        return 1 if self.kind == "rbf" else self.M

    def log_bounds(self) -> np.ndarray:
        m = self.components
        rows = [np.log(self.variance_bounds)]
        rows += [np.log(self.lengthscale_bounds)] * m
        rows += [(-LOGIT_BOUND, LOGIT_BOUND)] * (m - 1)
        rows += [np.log(self.noise_bounds)]
        return np.array(rows, dtype=float)


def _unpack(u: np.ndarray, m: int):
    variance = np.exp(u[0])
    lengthscales = np.exp(u[1 : 1 + m])
    logits = np.concatenate([[0.0], u[1 + m : 2 * m]])
    w = np.exp(logits - logits.max())
    return variance, lengthscales, w / w.sum(), np.exp(u[-1])


def _kok_cov(sq: np.ndarray, variance, lengthscales, weights) -> np.ndarray:
    out = np.zeros_like(sq)
    for w, ell in zip(weights, lengthscales):
        out += w * np.exp(-0.5 * sq / ell**2)
    return variance * out


@dataclass(eq=False)
class SurrogateModel:
    config: SurrogateConfig
    coords: np.ndarray
    y_raw: np.ndarray
    y_mean: float
    y_std: float
    variance: float
    lengthscales: np.ndarray
    weights: np.ndarray
    noise: float
    lml: float
    chol: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    degenerate: bool = False
    start_lmls: list = field(default_factory=list)

    def predict(self, Z, std_units: bool = False):
        """Posterior mean and standard deviation at rows of ``Z`` (raw LML units by default)."""
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        if self.degenerate:
            mu = np.zeros(len(Z))
            sd = np.full(len(Z), np.sqrt(self.variance))
        else:
            Ks = _kok_cov(cdist(self.coords, Z, "sqeuclidean"), self.variance, self.lengthscales, self.weights)
            mu = Ks.T @ self.alpha
            v = solve_triangular(self.chol, Ks, lower=True)
            sd = np.sqrt(np.maximum(self.variance - np.sum(v**2, axis=0), 0.0))
        if std_units:
            return mu, sd
        return self.y_mean + self.y_std * mu, self.y_std * sd

    def hyperparameters(self) -> dict:
        return {
            "variance": float(self.variance),
            "lengthscales": [float(v) for v in self.lengthscales],
            "weights": [float(v) for v in self.weights],
            "noise": float(self.noise),
            "lml": float(self.lml),
            "degenerate": self.degenerate,
        }


def _surrogate_evidence(u, sq, y, m):
    variance, ells, w, noise = _unpack(u, m)
    C = _kok_cov(sq, variance, ells, w) + noise * np.eye(len(y))
    L, _ = _cholesky(C, "surrogate")
    alpha = cho_solve((L, True), y)
    lml = -0.5 * y @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * len(y) * np.log(2 * np.pi)
    return float(lml), L, alpha


def fit_surrogate(config: SurrogateConfig, coords, lmls, seed: int = 0) -> SurrogateModel:
    """Fit the kernel-of-kernels GP by multi-start bounded Nelder-Mead on its evidence.

    Observations equal to the failure sentinel are dropped. Outputs are
    z-scored; if they are all equal the model falls back to the prior.
    """
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    y_raw = np.asarray(lmls, dtype=float)
    if len(coords) != len(y_raw):
        raise InvalidArgumentError("coords and lmls differ in length")
    keep = y_raw > FAILED_LML
    coords, y_raw = coords[keep], y_raw[keep]
    if len(y_raw) < 2:
        raise InvalidArgumentError("need at least 2 successful observations")
    m = config.components
    lb = config.log_bounds()
    y_mean, y_std = float(y_raw.mean()), float(y_raw.std())
    if y_std == 0.0:
        warnings.warn("all surrogate observations are equal; using the prior", RuntimeWarning)
        u = lb.mean(axis=1)
        variance, ells, w, noise = _unpack(u, m)
        return SurrogateModel(config, coords, y_raw, y_mean, 1.0, variance, ells, w, noise, float("nan"),
                              np.eye(len(y_raw)), np.zeros(len(y_raw)), degenerate=True)
    y = (y_raw - y_mean) / y_std
    sq = cdist(coords, coords, "sqeuclidean")

    def neg(u):
        try:
            return -_surrogate_evidence(np.clip(u, lb[:, 0], lb[:, 1]), sq, y, m)[0]
        except NumericalFailure:
            return np.inf

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        u = qmc.Sobol(len(lb), scramble=True, seed=seed).random(config.restarts)
    starts = lb[:, 0] + u * (lb[:, 1] - lb[:, 0])
    best_u, best_f, start_lmls = None, np.inf, []
    for u0 in starts:
        f0 = neg(u0)
        start_lmls.append(-f0)
        cand_u, cand_f = u0, f0
        if np.isfinite(f0):
            res = minimize(neg, u0, method="Nelder-Mead", bounds=lb,
                           options={"maxfev": config.max_evals, "xatol": 1e-7, "fatol": 1e-9})
            if res.fun < cand_f:
                cand_u, cand_f = np.clip(res.x, lb[:, 0], lb[:, 1]), float(res.fun)
        if cand_f < best_f:
            best_u, best_f = cand_u, cand_f
    if best_u is None:
        raise NumericalFailure("surrogate fit failed from every start")
    lml, L, alpha = _surrogate_evidence(best_u, sq, y, m)
    variance, ells, w, noise = _unpack(best_u, m)
    return SurrogateModel(config, coords, y_raw, y_mean, y_std, variance, ells, w, noise, lml, L, alpha,
                          start_lmls=start_lmls)


def expected_improvement_from_moments(mu, sigma, best):
    """EI for maximization; reduces to max(mu - best, 0) when sigma <= 1e-12."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    imp = mu - best
    safe = np.where(sigma > 1e-12, sigma, 1.0)
    u = imp / safe
    ei = imp * norm.cdf(u) + safe * norm.pdf(u)
    ei = np.where(sigma > 1e-12, ei, np.maximum(imp, 0.0))
    return np.maximum(ei, 0.0)


def expected_improvement(model: SurrogateModel, z, best: float):
    """EI at ``z`` (one point or rows of points) against incumbent ``best`` (raw units)."""
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    mu, sd = model.predict(np.atleast_2d(z), std_units=True)
    best_std = (best - model.y_mean) / model.y_std
    ei = expected_improvement_from_moments(mu, sd, best_std) * model.y_std
    return float(ei[0]) if single else ei


def _incumbent(model: SurrogateModel) -> float:
    return float(np.max(model.y_raw))


def propose_next(
    model: SurrogateModel,
    embedding,
    evaluated,
    mode: str = "continuous_snap",
    seed: int = 0,
    n_random: int = 8,
    n_local: int = 8,
):
    """Next library index to evaluate; returns (index, acquisition value).

    ``continuous_snap`` ascends EI from random and perturbed-incumbent starts
    inside the embedding's bounding box, then snaps to the nearest unevaluated
    row. ``discrete_argmax`` scores every unevaluated row. Ties go to the lowest index.
    """
    Z = embedding.Z if hasattr(embedding, "Z") else np.asarray(embedding, dtype=float)
    evaluated = set(int(i) for i in evaluated)
    free = np.array([i for i in range(len(Z)) if i not in evaluated], dtype=int)
    if len(free) == 0:
        raise ExhaustedLibraryError("every library kernel has been evaluated")
    if mode not in MODES:
        raise InvalidArgumentError(f"unknown mode {mode!r}")
    best = _incumbent(model)
    if len(free) == 1:
        return int(free[0]), float(expected_improvement(model, Z[free[0]], best))
    if mode == "discrete_argmax":
        ei = expected_improvement(model, Z[free], best)
        k = int(np.argmax(ei))
        return int(free[k]), float(ei[k])

    rng = np.random.default_rng(seed)
    lo, hi = Z.min(axis=0), Z.max(axis=0)
    width = np.where(hi > lo, hi - lo, 1.0)
    starts = [lo + rng.random(Z.shape[1]) * width for _ in range(n_random)]
    anchor = model.coords[int(np.argmax(model.y_raw))]
    starts += [np.clip(anchor + 0.1 * width * rng.standard_normal(Z.shape[1]), lo, hi) for _ in range(n_local)]
    scale = model.y_std

    def neg_ei(z):
        return -expected_improvement(model, z, best) / scale

    best_z, best_val = None, -np.inf
    for z0 in starts:
        res = minimize(neg_ei, z0, method="L-BFGS-B", bounds=list(zip(lo, hi)), options={"maxiter": 50})
        val = -float(res.fun)
        if val > best_val:
            best_z, best_val = np.clip(res.x, lo, hi), val
    d = np.linalg.norm(Z[free] - best_z, axis=1)
    k = int(np.argmin(d))
    return int(free[k]), float(expected_improvement(model, Z[free[k]], best))


# ---------------------------------------------------------------------------
# Traces and search loops
# ---------------------------------------------------------------------------


@dataclass
class TraceRecord:
    iteration: int
    kernel_index: int
    expr: str
    lml: float
    best_lml: float
    acquisition: float | None = None
    seconds: float = 0.0


@dataclass
class SearchTrace:
    method: str
    seed: int
    records: list = field(default_factory=list)
    exhausted: bool = False
    flags: list = field(default_factory=list)

    def append(self, kernel_index, expr, lml, acquisition=None, seconds=0.0):
        prev = self.records[-1].best_lml if self.records else -np.inf
        rec = TraceRecord(len(self.records) + 1, int(kernel_index), expr, float(lml),
                          float(max(prev, lml)), None if acquisition is None else float(acquisition), seconds)
        self.records.append(rec)
        return rec

    @property
    def indices(self) -> list:
        return [r.kernel_index for r in self.records]

    @property
    def best_lml(self) -> float:
        return self.records[-1].best_lml if self.records else float("-inf")

    @property
    def best_expr(self) -> str:
        if not self.records:
            return ""
        return max(self.records, key=lambda r: (r.lml, -r.iteration)).expr

    def best_curve(self, length: int | None = None) -> np.ndarray:
        """Best-so-far by evaluation count, padded with the final value to ``length``."""
        curve = [r.best_lml for r in self.records]
        if length is not None:
            curve = (curve + [curve[-1]] * length)[:length] if curve else [np.nan] * length
        return np.array(curve)

    def best_at(self, evaluations: int) -> float:
        return float(self.best_curve(evaluations)[-1])

    @property
    def total_seconds(self) -> float:
        return float(sum(r.seconds for r in self.records))

    def deterministic_records(self) -> list:
        out = []
        for r in self.records:
            d = asdict(r)
            d.pop("seconds")
            out.append(d)
        return out

    def summary(self) -> dict:
        return {
            "method": self.method,
            "seed": self.seed,
            "best_expr": self.best_expr,
            "best_lml": self.best_lml,
            "evaluations": len(self.records),
            "exhausted": self.exhausted,
            "flags": list(self.flags),
        }

    def save(self, path_prefix, extra: dict | None = None) -> None:
        """``<prefix>.jsonl`` (records), ``<prefix>.summary.json``, ``<prefix>.timing.json``.

        Wall-clock lives only in the timing file so the other two are
        reproducible byte for byte.
        """
        with open(f"{path_prefix}.jsonl", "w") as fh:
            for rec in self.deterministic_records():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        summary = self.summary()
        summary.update(extra or {})
        with open(f"{path_prefix}.summary.json", "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
        with open(f"{path_prefix}.timing.json", "w") as fh:
            json.dump({"seconds": [r.seconds for r in self.records], "total_seconds": self.total_seconds}, fh)
            fh.write("\n")

    @classmethod
    def load(cls, path_prefix) -> "SearchTrace":
        with open(f"{path_prefix}.summary.json") as fh:
            summary = json.load(fh)
        trace = cls(summary["method"], summary["seed"], exhausted=summary.get("exhausted", False),
                    flags=summary.get("flags", []))
        with open(f"{path_prefix}.jsonl") as fh:
            for line in fh:
                trace.records.append(TraceRecord(**json.loads(line)))
        try:
            with open(f"{path_prefix}.timing.json") as fh:
                for rec, s in zip(trace.records, json.load(fh)["seconds"]):
                    rec.seconds = s
        except FileNotFoundError:
            pass
        return trace


def _objective_for(data, objective, fit_budget, fit_seed):
    if objective is not None:
        return objective
    if data is None:
        raise InvalidArgumentError("either a dataset or an objective is required")
    return CachedObjective(data, fit_budget, fit_seed)


def initial_indices(n: int, count: int, seed: int) -> np.ndarray:
    """Seeded uniform permutation; BO and random search share its prefix."""
    return np.random.default_rng(seed).permutation(n)[:count]


def run_bo(
    library,
    embedding,
    data: Dataset | None = None,
    config: SurrogateConfig | None = None,
    n_init: int = 3,
    iters: int = 50,
    seed: int = 0,
    mode: str = "continuous_snap",
    objective=None,
    fit_budget: FitBudget | None = None,
    fit_seed: int = 0,
) -> SearchTrace:
    """BO over the embedded library. ``objective(expr) -> lml`` overrides GP fitting on ``data``."""
    config = config or SurrogateConfig()
    exprs = list(library)
    Z = embedding.Z if hasattr(embedding, "Z") else np.asarray(embedding, dtype=float)
    if len(Z) != len(exprs):
        raise InvalidArgumentError("embedding rows must match library size")
    if n_init < 2:
        raise InvalidArgumentError("n_init must be >= 2")
    if n_init > len(exprs):
        raise InvalidArgumentError("n_init exceeds library size")
    f = _objective_for(data, objective, fit_budget, fit_seed)
    method = "bo_rbf" if config.kind == "rbf" else "bo_multiscale"
    trace = SearchTrace(method, seed)
    for idx in initial_indices(len(exprs), n_init, seed):
        t0 = time.perf_counter()
        val = f(exprs[idx])
        trace.append(idx, print_expr(exprs[idx]), val, None, time.perf_counter() - t0)
    for it in range(iters):
        if len(trace.records) >= len(exprs):
            trace.exhausted = True
            trace.flags.append("exhausted")
            break
        t0 = time.perf_counter()
        idx_seen = trace.indices
        vals = [r.lml for r in trace.records]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            try:
                model = fit_surrogate(config, Z[idx_seen], vals, seed=seed + it)
            except InvalidArgumentError:
                model = None
        if model is None:
            # fewer than two usable observations: fall back to the next random index
            rest = [i for i in np.random.default_rng([seed, it]).permutation(len(exprs)) if i not in idx_seen]
            idx, acq = int(rest[0]), None
        else:
            idx, acq = propose_next(model, Z, idx_seen, mode, seed=seed * 100003 + it)
        val = f(exprs[idx])
        trace.append(idx, print_expr(exprs[idx]), val, acq, time.perf_counter() - t0)
    return trace


def run_random(
    library,
    data: Dataset | None = None,
    budget: int = 53,
    seed: int = 0,
    objective=None,
    fit_budget: FitBudget | None = None,
    fit_seed: int = 0,
) -> SearchTrace:
    """Uniform draws without replacement; shares its first draws with :func:`run_bo`."""
    exprs = list(library)
    if budget > len(exprs):
        raise InvalidArgumentError("budget exceeds library size")
    f = _objective_for(data, objective, fit_budget, fit_seed)
    trace = SearchTrace("random", seed)
    for idx in initial_indices(len(exprs), budget, seed):
        t0 = time.perf_counter()
        val = f(exprs[idx])
        trace.append(idx, print_expr(exprs[idx]), val, None, time.perf_counter() - t0)
    return trace


def planted_objective(library, embedding, target: int, scale: float = 1.0):
    """Smooth synthetic objective over embedding rows with its unique maximum at ``target``."""
    Z = embedding.Z if hasattr(embedding, "Z") else np.asarray(embedding, dtype=float)
    z_star = Z[target]
    table = {print_expr(e): -scale * float(np.sum((Z[i] - z_star) ** 2)) for i, e in enumerate(library)}

    def objective(expr):
        return table.get(print_expr(expr), FAILED_LML)

    objective.table = table
    return objective
