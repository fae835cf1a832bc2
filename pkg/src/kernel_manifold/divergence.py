"""Hyperparameter-marginalized divergences between GP priors on a reference grid,
distance transforms, and Gram-spectrum diagnostics."""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import qmc

from .errors import InvalidArgumentError, NumericalFailure
from .grammar import KernelExpr, KernelLibrary, covariance_from_distances, pairwise_distances, print_expr
from .utils import array_digest, read_json, read_matrix_csv, sidecar_path, write_json, write_matrix_csv

PRIOR_JITTER = 1e-6
JITTER_LADDER = (PRIOR_JITTER, 1e-4, 1e-2)
LOG2 = math.log(2.0)
KINDS = ("hellinger_sq", "kl_sym", "js", "sqrt_js_sq")
DEFAULT_SAMPLES = 64
DEFAULT_MC = 256


@dataclass(frozen=True)
class ReferenceGrid:
    n_ref: int = 50

    def __post_init__(self):
        if self.n_ref < 2:
            raise InvalidArgumentError("reference grid needs at least 2 points")

    @property
    def points(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n_ref)

    def distances(self) -> np.ndarray:
        return pairwise_distances(self.points)


@dataclass(frozen=True, eq=False)
class GaussianPrior:
    """Zero-mean Gaussian N(0, cov) with its Cholesky factor and log-determinant."""

    cov: np.ndarray
    chol: np.ndarray
    logdet: float

    @property
    def dim(self) -> int:
        return self.cov.shape[0]

    @classmethod
    def from_cov(cls, K: np.ndarray, jitter: float = PRIOR_JITTER) -> "GaussianPrior":
        K = np.asarray(K, dtype=float)
        K = 0.5 * (K + K.T)
        n = K.shape[0]
        for j in (jitter,) + tuple(x for x in JITTER_LADDER if x > jitter):
            cov = K + j * np.eye(n)
            try:
                L = np.linalg.cholesky(cov)
            except np.linalg.LinAlgError:
                continue
            return cls(cov, L, 2.0 * float(np.sum(np.log(np.diag(L)))))
        raise NumericalFailure("prior covariance is not positive definite after jitter escalation")

    @classmethod
    def from_kernel(cls, expr: KernelExpr, theta, grid: ReferenceGrid | None = None) -> "GaussianPrior":
        grid = grid or ReferenceGrid()
        return cls.from_cov(covariance_from_distances(expr, np.asarray(theta, float), grid.distances()))

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        """Log-density at rows of ``x``."""
        z = np.linalg.solve(self.chol, np.atleast_2d(x).T)
        return -0.5 * np.sum(z**2, axis=0) - 0.5 * self.logdet - 0.5 * self.dim * math.log(2 * math.pi)


def _check_dims(p: GaussianPrior, q: GaussianPrior):
    if p.dim != q.dim:
        raise InvalidArgumentError(f"dimension mismatch: {p.dim} vs {q.dim}")


def hellinger_sq(p: GaussianPrior, q: GaussianPrior) -> float:
    """Squared Hellinger distance 1 - BC between zero-mean Gaussians."""
    _check_dims(p, q)
    try:
        L = np.linalg.cholesky(0.5 * (p.cov + q.cov))
    except np.linalg.LinAlgError as err:
        raise NumericalFailure("average covariance is not positive definite") from err
    log_bc = 0.25 * p.logdet + 0.25 * q.logdet - float(np.sum(np.log(np.diag(L))))
    return float(np.clip(-np.expm1(log_bc), 0.0, 1.0))


def kl(p: GaussianPrior, q: GaussianPrior) -> float:
    """KL(p || q) for zero-mean Gaussians (asymmetric)."""
    _check_dims(p, q)
    A = np.linalg.solve(q.chol, p.chol)
    val = 0.5 * (float(np.sum(A**2)) - p.dim + q.logdet - p.logdet)
    return max(val, 0.0)


def js(p: GaussianPrior, q: GaussianPrior, mc_samples: int = DEFAULT_MC, seed: int = 0, return_se: bool = False):
    """Monte Carlo Jensen-Shannon divergence, clamped to [0, log 2].

    Both sides reuse the same standard-normal draws, which makes the estimate
    symmetric in its arguments and exactly zero when ``p`` equals ``q``.
    """
    _check_dims(p, q)
    if mc_samples < 1:
        raise InvalidArgumentError("mc_samples must be >= 1")
    eps = np.random.default_rng(seed).standard_normal((p.dim, mc_samples))
    t_p = _js_side(p.chol, q.chol, p.logdet, q.logdet, eps)
    t_q = _js_side(q.chol, p.chol, q.logdet, p.logdet, eps)
    est = 0.5 * (t_p.mean() + t_q.mean())
    se = 0.5 * math.sqrt((t_p.var(ddof=1) + t_q.var(ddof=1)) / mc_samples) if mc_samples > 1 else float("inf")
    est = float(np.clip(est, 0.0, LOG2))
    return (est, se) if return_se else est


def _js_side(Lp, Lq, logdet_p, logdet_q, eps):
    """Per-draw log(p(x)/m(x)) for x = Lp @ eps (works batched over leading axes)."""
    z = np.linalg.solve(Lq, Lp) @ eps
    lp = -0.5 * np.sum(eps**2, axis=-2) - 0.5 * np.asarray(logdet_p)[..., None]
    lq = -0.5 * np.sum(z**2, axis=-2) - 0.5 * np.asarray(logdet_q)[..., None]
    return LOG2 - np.logaddexp(0.0, lq - lp)


# ---------------------------------------------------------------------------
# Distance matrices
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class DistanceMatrix:
    """Symmetric matrix of squared dissimilarities with build metadata."""

    D: np.ndarray
    kind: str
    transform: str = "none"
    samples: int = DEFAULT_SAMPLES
    seed: int = 0
    n_ref: int = 50
    library_hash: str = ""
    labels: list = field(default_factory=list)
    clamp_count: int = 0
    evaluations: int = 0

    @property
    def N(self) -> int:
        return self.D.shape[0]

    def off_diagonal(self) -> np.ndarray:
        return self.D[np.triu_indices(self.N, 1)]

    def digest(self) -> str:
        return array_digest(self.D)

    def metadata(self) -> dict:
        return {
            "kind": self.kind,
            "transform": self.transform,
            "S": self.samples,
            "seed": self.seed,
            "N_ref": self.n_ref,
            "library_hash": self.library_hash,
            "labels": list(self.labels),
            "clamp_count": self.clamp_count,
            "evaluations": self.evaluations,
            "matrix_hash": self.digest(),
        }

    def save(self, path, extra: dict | None = None) -> None:
        write_matrix_csv(path, self.D)
        meta = self.metadata()
        meta.update(extra or {})
        write_json(sidecar_path(path), meta)

    @classmethod
    def load(cls, path) -> "DistanceMatrix":
        D = read_matrix_csv(path)
        try:
            meta = read_json(sidecar_path(path))
        except FileNotFoundError:
            meta = {}
        return cls(
            D,
            meta.get("kind", "unknown"),
            meta.get("transform", "none"),
            meta.get("S", 0),
            meta.get("seed", 0),
            meta.get("N_ref", 0),
            meta.get("library_hash", ""),
            meta.get("labels", []),
            meta.get("clamp_count", 0),
            meta.get("evaluations", 0),
        )


def hyperparameter_draws(library, samples: int, seed: int) -> list[np.ndarray]:
    """Per-kernel (samples, n_params) hyperparameter draws.

    One scrambled Sobol sequence spans the concatenated hyperparameter boxes of
    every library member; each kernel reads its own block of coordinates. The
    draws for a pair are therefore a low-discrepancy set over the pair's joint
    box, and a kernel sees the same draws in every pair it takes part in.
    """
    bounds = [e.bounds() for e in library]
    total = sum(len(b) for b in bounds)
    if total == 0:
        return [np.zeros((samples, 0)) for _ in bounds]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        u = qmc.Sobol(total, scramble=True, seed=seed).random(samples)
    out, col = [], 0
    for b in bounds:
        k = len(b)
        out.append(b[:, 0] + u[:, col : col + k] * (b[:, 1] - b[:, 0]))
        col += k
    return out


class _PriorBatch:
    """The S priors of one kernel: covariances, Cholesky factors, log-determinants."""

    def __init__(self, expr: KernelExpr, thetas: np.ndarray, r: np.ndarray):
        K = covariance_from_distances(expr, thetas, r)
        n = r.shape[0]
        self.cov = np.empty_like(K)
        self.chol = np.empty_like(K)
        self.logdet = np.empty(len(K))
        for s, Ks in enumerate(K):
            prior = GaussianPrior.from_cov(Ks)
            self.cov[s], self.chol[s], self.logdet[s] = prior.cov, prior.chol, prior.logdet
        self.n = n


def _pair_values(kind: str, a: _PriorBatch, b: _PriorBatch, eps: np.ndarray | None):
    """Per-draw divergence values for one pair; returns (values, clamp count)."""
    if kind == "hellinger_sq":
        try:
            L = np.linalg.cholesky(0.5 * (a.cov + b.cov))
        except np.linalg.LinAlgError as err:
            raise NumericalFailure("average covariance is not positive definite") from err
        log_bc = 0.25 * a.logdet + 0.25 * b.logdet - np.sum(np.log(np.diagonal(L, axis1=1, axis2=2)), axis=1)
        raw = -np.expm1(log_bc)
        lo, hi = 0.0, 1.0
    elif kind == "kl_sym":
        A = np.linalg.solve(b.chol, a.chol)
        B = np.linalg.solve(a.chol, b.chol)
        tr_ab = np.sum(A**2, axis=(1, 2))
        tr_ba = np.sum(B**2, axis=(1, 2))
        # The log-determinant terms cancel in the symmetrized sum.
        jeffreys_half = 0.25 * (tr_ab + tr_ba - 2 * a.n)
        raw = np.maximum(jeffreys_half, 0.0) ** 2
        lo, hi = 0.0, np.inf
    else:
        t_a = _js_side(a.chol, b.chol, a.logdet, b.logdet, eps)
        t_b = _js_side(b.chol, a.chol, b.logdet, a.logdet, eps)
        raw = 0.5 * (t_a.mean(axis=-1) + t_b.mean(axis=-1))
        lo, hi = 0.0, LOG2
    if not np.all(np.isfinite(raw)):
        raise NumericalFailure("non-finite divergence value")
    clamps = int(np.sum((raw < lo) | (raw > hi)))
    return np.clip(raw, lo, hi), clamps


def _build_rows(args):
    exprs, draws, n_ref, kind, mc_samples, seed, rows = args
    r = ReferenceGrid(n_ref).distances()
    eps = None
    if kind in ("js", "sqrt_js_sq"):
        S = draws[0].shape[0] if draws else 0
        eps = np.random.default_rng([seed, 1]).standard_normal((S, n_ref, mc_samples))
    cache: dict[int, _PriorBatch] = {}

    def batch(i):
        if i not in cache:
            cache[i] = _PriorBatch(exprs[i], draws[i], r)
        return cache[i]

    out = []
    failures = []
    clamps = 0
    for i in rows:
        a = batch(i)
        vals = np.zeros(len(exprs))
        for j in range(i + 1, len(exprs)):
            try:
                v, c = _pair_values(kind, a, batch(j), eps)
            except NumericalFailure as err:
                failures.append((i, j, str(err)))
                continue
            vals[j] = float(np.mean(v))
            clamps += c
        out.append((i, vals))
        # Row i is never needed again by later rows of this worker.
        cache.pop(i, None)
    return out, failures, clamps


def build_distance_matrix(
    library,
    grid: ReferenceGrid | None = None,
    kind: str = "sqrt_js_sq",
    samples: int = DEFAULT_SAMPLES,
    seed: int = 0,
    mc_samples: int = DEFAULT_MC,
    workers: int = 1,
) -> DistanceMatrix:
    """Expected divergence between the priors of every pair of library kernels.

    Each entry averages the per-draw divergence over ``samples`` quasi-random
    hyperparameter draws (uniform within the schema bounds). ``js`` and
    ``sqrt_js_sq`` both store the averaged JS value, i.e. the squared
    sqrt-JS distance. ``kl_sym`` stores the average of the squared symmetrized
    KL, (KL(p||q) + KL(q||p))^2 / 4. Every pair is computed once and mirrored.
    """
    if kind not in KINDS:
        raise InvalidArgumentError(f"unknown divergence kind {kind!r}; expected one of {KINDS}")
    if samples < 1:
        raise InvalidArgumentError("samples must be >= 1")
    grid = grid or ReferenceGrid()
    exprs = list(library)
    N = len(exprs)
    draws = hyperparameter_draws(exprs, samples, seed)
    D = np.zeros((N, N))
    lib_hash = library.digest() if isinstance(library, KernelLibrary) else ""
    labels = [print_expr(e) for e in exprs]
    if N > 1:
        row_ids = list(range(N - 1))
        chunks = [row_ids[k::workers] for k in range(workers)] if workers > 1 else [row_ids]
        jobs = [(exprs, draws, grid.n_ref, kind, mc_samples, seed, rows) for rows in chunks if rows]
        if workers > 1:
            with ProcessPoolExecutor(workers) as pool:
                results = list(pool.map(_build_rows, jobs))
        else:
            results = [_build_rows(job) for job in jobs]
        failures, clamps = [], 0
        for out, fails, c in results:
            failures.extend(fails)
            clamps += c
            for i, vals in out:
                D[i, i + 1 :] = vals[i + 1 :]
        if failures:
            pairs = ", ".join(f"({labels[i]}, {labels[j]})" for i, j, _ in failures[:10])
            raise NumericalFailure(f"{len(failures)} pair(s) failed: {pairs}")
        D = D + D.T
    else:
        clamps = 0
    return DistanceMatrix(
        D, kind, "none", samples, seed, grid.n_ref, lib_hash, labels, clamps, samples * N * (N - 1) // 2
    )


# ---------------------------------------------------------------------------
# Transforms
# ---------------------------------------------------------------------------


def _as_matrix(D):
    if isinstance(D, DistanceMatrix):
        return D, D.D
    return None, np.asarray(D, dtype=float)


def _wrap(src, M, transform):
    if src is None:
        return DistanceMatrix(M, "unknown", transform)
    tag = transform if src.transform == "none" else f"{src.transform}+{transform}"
    return replace(src, D=M, transform=tag)


def transform_log1p(D):
    """log(1 + d) entrywise; keeps the zero diagonal."""
    src, M = _as_matrix(D)
    if np.any(M < 0):
        raise InvalidArgumentError("distance entries must be nonnegative")
    return _wrap(src, np.log1p(M), "log1p")


def transform_log_eps(D, eps: float = 1e-8):
    """log(d + eps) shifted by -log(eps) so the diagonal stays zero."""
    if eps <= 0:
        raise InvalidArgumentError("eps must be positive")
    src, M = _as_matrix(D)
    if np.any(M < 0):
        raise InvalidArgumentError("distance entries must be nonnegative")
    out = np.log1p(M / eps)
    np.fill_diagonal(out, 0.0)
    return _wrap(src, out, f"log_eps({eps:g})")


def transform_chordal(D_geodesic, radius: float = 1.0):
    """Geodesic lengths on a sphere of ``radius`` to squared chord lengths."""
    if radius <= 0:
        raise InvalidArgumentError("radius must be positive")
    src, M = _as_matrix(D_geodesic)
    ratio = M / radius
    if np.any(ratio > math.pi + 1e-9) or np.any(ratio < 0):
        raise InvalidArgumentError("geodesic distance outside [0, pi * radius]")
    chord = 2.0 * radius * np.sin(np.clip(ratio, 0.0, math.pi) / 2.0)
    return _wrap(src, chord**2, "chordal")


# ---------------------------------------------------------------------------
# Gram spectrum
# ---------------------------------------------------------------------------


def double_center(D: np.ndarray) -> np.ndarray:
    """B = -1/2 J D J with J = I - 11^T / N."""
    D = np.asarray(D, dtype=float)
    row = D.mean(axis=1, keepdims=True)
    col = D.mean(axis=0, keepdims=True)
    B = -0.5 * (D - row - col + D.mean())
    return 0.5 * (B + B.T)


@dataclass(eq=False)
class GramSpectrum:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @property
    def min_eigenvalue(self) -> float:
        return float(self.eigenvalues[-1])

    @property
    def max_eigenvalue(self) -> float:
        return float(self.eigenvalues[0])

    @property
    def negative_mass_ratio(self) -> float:
        lam = self.eigenvalues
        total = np.sum(np.abs(lam))
        return float(np.sum(np.abs(lam[lam < 0])) / total) if total > 0 else 0.0

    @property
    def n_positive(self) -> int:
        return int(np.sum(self.eigenvalues > 0))

    def reconstruct(self) -> np.ndarray:
        V, lam = self.eigenvectors, self.eigenvalues
        return (V * lam) @ V.T

    def summary(self, top: int = 10) -> dict:
        return {
            "N": len(self.eigenvalues),
            "min_eigenvalue": self.min_eigenvalue,
            "max_eigenvalue": self.max_eigenvalue,
            "negative_mass_ratio": self.negative_mass_ratio,
            "n_positive": self.n_positive,
            "top_eigenvalues": [float(v) for v in self.eigenvalues[:top]],
        }


def gram_spectrum(D) -> GramSpectrum:
    """Eigen-decomposition of the double-centered Gram matrix, eigenvalues descending."""
    _, M = _as_matrix(D)
    lam, V = np.linalg.eigh(double_center(M))
    order = np.argsort(lam)[::-1]
    return GramSpectrum(lam[order], V[:, order])
