"""End-to-end orchestration: library, distances, embedding, search comparisons.

Every artifact lands under one output directory together with
``config.json`` and ``manifest.json``; the manifest records the config hash
and a sha256 per file so :func:`verify` can confirm lineage later.
"""

from __future__ import annotations

import csv
import io
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.stats import norm

from .benchmarks import BENCHMARKS, get_benchmark, load_csv_series, sample_benchmark, sobol_points
from .bo import SearchTrace, SurrogateConfig, run_bo, run_random
from .divergence import KINDS, DistanceMatrix, ReferenceGrid, build_distance_matrix
from .embedding import Embedding, classical_mds
from .errors import ConfigurationError, InvalidArgumentError, KernelManifoldError, NumericalFailure
from .ga import GAConfig, MockProposer, run_ga
from .gp import CachedObjective, Dataset, FitBudget, fit_gp, posterior_predict
from .grammar import KernelExpr, generate_library, parse_expr, print_expr
from .utils import config_hash, read_json, sha256_file, stable_int, write_json

METHODS = ("bo_multiscale", "bo_rbf", "random", "ga")


@dataclass(frozen=True)
class DatasetSpec:
    """Either a benchmark (``benchmark``, ``n``, ``seed``) or a CSV series."""

    benchmark: str | None = None
    n: int = 40
    seed: int = 0
    csv: str | None = None
    x_column: str = "x"
    y_column: str = "y"

    def validate(self):
        if (self.benchmark is None) == (self.csv is None):
            raise ConfigurationError("a dataset needs exactly one of 'benchmark' or 'csv'")
        if self.benchmark is not None:
            get_benchmark(self.benchmark)
            if self.n < 4:
                raise ConfigurationError("benchmark datasets need n >= 4")
        elif not os.path.exists(self.csv):
            raise ConfigurationError(f"CSV file {self.csv} does not exist")

    @property
    def label(self) -> str:
        if self.benchmark is not None:
            return f"{self.benchmark}_n{self.n}_s{self.seed}"
        return os.path.splitext(os.path.basename(self.csv))[0]

    def load(self) -> tuple[Dataset, dict]:
        if self.benchmark is not None:
            data = sample_benchmark(self.benchmark, self.n, self.seed)
            return data, {"source": "benchmark", "name": self.benchmark, "n": self.n, "seed": self.seed,
                          "sampling": "scrambled Sobol over the standard domain", "noise": "none"}
        series = load_csv_series(self.csv, self.x_column, self.y_column)
        return series.data, {"source": "csv", "path": self.csv, "n": series.data.n, "dropped_rows": series.dropped}


@dataclass(frozen=True)
class ExperimentConfig:
    datasets: tuple = (DatasetSpec("dropwave"),)
    methods: tuple = ("bo_multiscale", "random")
    seeds: tuple = (0, 1, 2, 3, 4)
    n_init: int = 3
    iters: int = 12
    max_depth: int = 3
    divergence: str = "sqrt_js_sq"
    samples: int = 64
    n_ref: int = 50
    divergence_seed: int = 7
    mc_samples: int = 256
    p: int = 15
    acquisition: str = "continuous_snap"
    surrogate_components: int = 3
    ga_mutation_prob: float = 0.7
    ga_population: int = 6
    fit_restarts: int = 8
    fit_max_evals: int = 200
    fit_seed: int = 0
    workers: int = 1
    out_dir: str = "results"
    cache_dir: str | None = None
    svg: bool = False

    def validate(self) -> "ExperimentConfig":
        if not self.datasets:
            raise ConfigurationError("no datasets configured")
        for d in self.datasets:
            d.validate()
        bad = [m for m in self.methods if m not in METHODS]
        if bad or not self.methods:
            raise ConfigurationError(f"unknown methods {bad}; valid: {', '.join(METHODS)}")
        if not self.seeds:
            raise ConfigurationError("no seeds configured")
        if self.n_init < 2 or self.iters < 0:
            raise ConfigurationError("need n_init >= 2 and iters >= 0")
        if self.divergence not in KINDS:
            raise ConfigurationError(f"divergence must be one of {KINDS}")
        if self.p < 1 or self.samples < 1 or self.n_ref < 2 or self.workers < 1:
            raise ConfigurationError("p, samples, workers must be >= 1 and n_ref >= 2")
        return self

    @property
    def budget(self) -> int:
        return self.n_init + self.iters

    def to_json(self) -> dict:
        d = asdict(self)
        d["datasets"] = [asdict(s) for s in self.datasets]
        d["methods"] = list(self.methods)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "ExperimentConfig":
        obj = dict(obj)
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        specs = obj.pop("datasets", None)
        if specs is not None:
            if isinstance(specs, (dict, str)):
                specs = [specs]
            obj["datasets"] = tuple(DatasetSpec(benchmark=s) if isinstance(s, str) else DatasetSpec(**s) for s in specs)
        for key in ("methods", "seeds"):
            if key in obj:
                obj[key] = tuple(obj[key])
        return cls(**obj)

    def hash(self) -> str:
        d = self.to_json()
        # where results go does not change what they are
        for key in ("out_dir", "cache_dir", "workers", "svg"):
            d.pop(key)
        return config_hash(d)


# ---------------------------------------------------------------------------
# Geometry cache
# ---------------------------------------------------------------------------


def geometry_key(library, kind: str, samples: int, seed: int, n_ref: int, mc_samples: int) -> str:
    return config_hash({"library": library.digest(), "kind": kind, "samples": samples, "seed": seed,
                        "n_ref": n_ref, "mc": mc_samples if kind in ("js", "sqrt_js_sq") else None})[:16]


def cached_geometry(library, cfg: ExperimentConfig, cache_dir: str, log=print) -> tuple[DistanceMatrix, Embedding, dict]:
    """Load or build the distance matrix and embedding for ``library``."""
    os.makedirs(cache_dir, exist_ok=True)
    key = geometry_key(library, cfg.divergence, cfg.samples, cfg.divergence_seed, cfg.n_ref, cfg.mc_samples)
    d_path = os.path.join(cache_dir, f"distances_{key}.csv")
    e_path = os.path.join(cache_dir, f"embedding_{key}_p{cfg.p}.csv")
    hit = os.path.exists(d_path)
    if hit:
        D = DistanceMatrix.load(d_path)
    else:
        log(f"building {cfg.divergence} matrix for {len(library)} kernels (S={cfg.samples})")
        D = build_distance_matrix(library, ReferenceGrid(cfg.n_ref), cfg.divergence, cfg.samples,
                                  cfg.divergence_seed, cfg.mc_samples, workers=cfg.workers)
        D.save(d_path, {"geometry_key": key})
    if os.path.exists(e_path):
        emb = Embedding.load(e_path)
    else:
        emb = classical_mds(D, cfg.p)
        emb.save(e_path, {"geometry_key": key, "matrix_hash": D.digest()})
    return D, emb, {"geometry_key": key, "cache_hit": hit, "distances": d_path, "embedding": e_path}


# ---------------------------------------------------------------------------
# Comparison summary
# ---------------------------------------------------------------------------


@dataclass
class MethodStats:
    method: str
    mean: np.ndarray
    std: np.ndarray
    completed: int
    failed: int
    seconds_mean: float
    seconds_std: float

    def to_json(self) -> dict:
        return {"method": self.method, "mean": self.mean.tolist(), "std": self.std.tolist(),
                "completed": self.completed, "failed": self.failed}


@dataclass
class ComparisonSummary:
    """Per dataset and method: best-so-far mean and std across completed seeds."""

    budget: int
    stats: dict = field(default_factory=dict)  # dataset label -> method -> MethodStats
    failures: list = field(default_factory=list)
    config_hash: str = ""

    @classmethod
    def from_traces(cls, traces: dict, budget: int, failures=(), config_hash: str = "") -> "ComparisonSummary":
        """``traces`` maps (dataset, method) to a list of SearchTrace (completed cells only)."""
        out = cls(budget, {}, list(failures), config_hash)
        failed_count = {}
        for f in failures:
            failed_count[(f["dataset"], f["method"])] = failed_count.get((f["dataset"], f["method"]), 0) + 1
        for (ds, method), trs in traces.items():
            curves = np.array([t.best_curve(budget) for t in trs]) if trs else np.full((0, budget), np.nan)
            secs = np.array([t.total_seconds for t in trs]) if trs else np.array([np.nan])
            out.stats.setdefault(ds, {})[method] = MethodStats(
                method,
                curves.mean(axis=0) if len(trs) else np.full(budget, np.nan),
                curves.std(axis=0) if len(trs) else np.full(budget, np.nan),
                len(trs), failed_count.get((ds, method), 0),
                float(np.mean(secs)), float(np.std(secs)),
            )
        return out

    def final(self, dataset: str, method: str) -> float:
        return float(self.stats[dataset][method].mean[-1])

    def to_json(self) -> dict:
        return {
            "budget": self.budget,
            "config_hash": self.config_hash,
            "failures": self.failures,
            "datasets": {ds: {m: s.to_json() for m, s in ms.items()} for ds, ms in self.stats.items()},
        }

    def timing_json(self) -> dict:
        return {ds: {m: {"seconds_mean": s.seconds_mean, "seconds_std": s.seconds_std} for m, s in ms.items()}
                for ds, ms in self.stats.items()}

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["dataset", "method", "iteration", "mean_best_lml", "std_best_lml", "n_seeds"])
        for ds in sorted(self.stats):
            for m in sorted(self.stats[ds]):
                s = self.stats[ds][m]
                for i in range(self.budget):
                    w.writerow([ds, m, i + 1, f"{s.mean[i]:.17g}", f"{s.std[i]:.17g}", s.completed])
        return buf.getvalue()


def svg_line_chart(series: dict, title: str, xlabel: str = "evaluation", ylabel: str = "best LML",
                   width: int = 640, height: int = 400) -> str:
    """Minimal standalone SVG: one polyline per series with a +-1 std band."""
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    pad_l, pad_r, pad_t, pad_b = 70, 150, 40, 50
    allv = np.concatenate([np.concatenate([m - s, m + s]) for m, s in series.values()])
    allv = allv[np.isfinite(allv)]
    lo, hi = (float(allv.min()), float(allv.max())) if allv.size else (0.0, 1.0)
    if hi <= lo:
        lo, hi = lo - 1, hi + 1
    n = max(len(m) for m, _ in series.values())

    def px(i):
        return pad_l + (width - pad_l - pad_r) * (i / max(n - 1, 1))

    def py(v):
        return pad_t + (height - pad_t - pad_b) * (1 - (v - lo) / (hi - lo))

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{width / 2:.0f}" y="20" text-anchor="middle" font-size="14">{title}</text>',
             f'<line x1="{pad_l}" y1="{height - pad_b}" x2="{width - pad_r}" y2="{height - pad_b}" stroke="black"/>',
             f'<line x1="{pad_l}" y1="{pad_t}" x2="{pad_l}" y2="{height - pad_b}" stroke="black"/>',
             f'<text x="{(pad_l + width - pad_r) / 2:.0f}" y="{height - 12}" text-anchor="middle">{xlabel}</text>',
             f'<text x="16" y="{height / 2:.0f}" transform="rotate(-90 16 {height / 2:.0f})" text-anchor="middle">{ylabel}</text>']
    for t in np.linspace(lo, hi, 5):
        parts.append(f'<text x="{pad_l - 6}" y="{py(t) + 4:.1f}" text-anchor="end">{t:.3g}</text>')
    for i in sorted({0, n - 1, (n - 1) // 2}):
        parts.append(f'<text x="{px(i):.1f}" y="{height - pad_b + 16}" text-anchor="middle">{i + 1}</text>')
    for k, (name, (m, s)) in enumerate(series.items()):
        c = colors[k % len(colors)]
        upper = " ".join(f"{px(i):.1f},{py(v):.1f}" for i, v in enumerate(m + s))
        lower = " ".join(f"{px(i):.1f},{py(v):.1f}" for i, v in reversed(list(enumerate(m - s))))
        parts.append(f'<polygon points="{upper} {lower}" fill="{c}" fill-opacity="0.15" stroke="none"/>')
        pts = " ".join(f"{px(i):.1f},{py(v):.1f}" for i, v in enumerate(m))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{c}" stroke-width="2"/>')
        ly = pad_t + 18 * k
        parts.append(f'<line x1="{width - pad_r + 10}" y1="{ly}" x2="{width - pad_r + 30}" y2="{ly}" stroke="{c}" stroke-width="2"/>')
        parts.append(f'<text x="{width - pad_r + 35}" y="{ly + 4}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------------------
# run_experiment
# ---------------------------------------------------------------------------


def run_cell(method: str, seed: int, library, embedding, data: Dataset, cfg: ExperimentConfig,
             objective=None) -> SearchTrace:
    """One (method, seed) search; every method gets ``n_init + iters`` evaluations."""
    budget = FitBudget(cfg.fit_restarts, cfg.fit_max_evals)
    f = objective if objective is not None else CachedObjective(data, budget, cfg.fit_seed)
    if method in ("bo_multiscale", "bo_rbf"):
        sc = SurrogateConfig(kind="multiscale" if method == "bo_multiscale" else "rbf", M=cfg.surrogate_components)
        return run_bo(library, embedding, config=sc, n_init=cfg.n_init, iters=cfg.iters, seed=seed,
                      mode=cfg.acquisition, objective=f)
    if method == "random":
        return run_random(library, budget=cfg.budget, seed=seed, objective=f)
    if method == "ga":
        gc = GAConfig(population=cfg.ga_population, mutation_prob=cfg.ga_mutation_prob, max_depth=cfg.max_depth,
                      iterations=max(cfg.iters, 1) * 10, seed=seed, max_evaluations=cfg.budget)
        return run_ga(None, gc, MockProposer(seed), objective=f, library=library)
    raise InvalidArgumentError(f"unknown method {method!r}")


def _cell_job(args):
    method, seed, library, Z, data, cfg = args
    try:
        return run_cell(method, seed, library, Z, data, cfg), None
    except (KernelManifoldError, ArithmeticError, ValueError) as err:
        return None, f"{type(err).__name__}: {err}"


def run_experiment(config: ExperimentConfig, log=print) -> ComparisonSummary:
    """Run every (dataset, method, seed) cell and persist traces and summaries."""
    cfg = config.validate()
    h = cfg.hash()
    out = cfg.out_dir
    os.makedirs(out, exist_ok=True)
    write_json(os.path.join(out, "config.json"), {"config": cfg.to_json(), "config_hash": h})
    library = generate_library(cfg.max_depth)
    library.save(os.path.join(out, "library.json"))
    D, emb, geo = cached_geometry(library, cfg, cfg.cache_dir or os.path.join(out, "cache"), log)
    emb.save(os.path.join(out, "embedding.csv"), {"config_hash": h, "matrix_hash": D.digest()})

    traces, failures, datasets_meta = {}, [], {}
    for spec in cfg.datasets:
        data, meta = spec.load()
        meta["dataset_hash"] = data.digest()
        datasets_meta[spec.label] = meta
        tdir = os.path.join(out, "traces", spec.label)
        os.makedirs(tdir, exist_ok=True)
        cells = [(m, s) for m in cfg.methods for s in cfg.seeds]
        if cfg.workers > 1:
            with ProcessPoolExecutor(cfg.workers) as pool:
                results = list(pool.map(_cell_job, [(m, s, library, emb, data, cfg) for m, s in cells]))
        else:
            shared = CachedObjective(data, FitBudget(cfg.fit_restarts, cfg.fit_max_evals), cfg.fit_seed)
            results = []
            for m, s in cells:
                try:
                    results.append((run_cell(m, s, library, emb, data, cfg, shared), None))
                except (KernelManifoldError, ArithmeticError, ValueError) as err:
                    results.append((None, f"{type(err).__name__}: {err}"))
        for (m, s), (trace, err) in zip(cells, results):
            if trace is None:
                failures.append({"dataset": spec.label, "method": m, "seed": s, "error": err})
                log(f"[{spec.label}] {m} seed {s} failed: {err}")
                continue
            trace.save(os.path.join(tdir, f"{m}_seed{s}"), {"config_hash": h, "dataset": spec.label})
            traces.setdefault((spec.label, m), []).append(trace)
            log(f"[{spec.label}] {m} seed {s}: best {trace.best_lml:.3f} ({trace.best_expr})")
        for m in cfg.methods:
            traces.setdefault((spec.label, m), [])

    summary = ComparisonSummary.from_traces(traces, cfg.budget, failures, h)
    body = summary.to_json()
    body["datasets_meta"] = datasets_meta
    body["geometry"] = {"key": geo["geometry_key"], "matrix_hash": D.digest(), "embedding_hash": emb.digest(),
                        "library_hash": library.digest(), "p": emb.p}
    write_json(os.path.join(out, "summary.json"), body)
    write_json(os.path.join(out, "timing.json"), summary.timing_json())
    with open(os.path.join(out, "curves.csv"), "w") as fh:
        fh.write(summary.csv_text())
    if cfg.svg:
        for ds, ms in summary.stats.items():
            with open(os.path.join(out, f"curves_{ds}.svg"), "w") as fh:
                fh.write(svg_line_chart({m: (s.mean, s.std) for m, s in ms.items()}, ds))
    write_manifest(out, h)
    return summary


# ---------------------------------------------------------------------------
# Manifest and verification
# ---------------------------------------------------------------------------

_UNHASHED = ("manifest.json",)


def _artifact_files(root: str) -> list[str]:
    files = []
    for d, _, names in os.walk(root):
        for name in names:
            rel = os.path.relpath(os.path.join(d, name), root)
            if rel in _UNHASHED or rel.startswith("cache" + os.sep) or "timing" in name:
                continue
            files.append(rel)
    return sorted(files)


def write_manifest(root: str, cfg_hash: str) -> dict:
    """Hash every deterministic artifact below ``root`` (timing files excluded)."""
    manifest = {"config_hash": cfg_hash, "files": {rel: sha256_file(os.path.join(root, rel)) for rel in _artifact_files(root)}}
    write_json(os.path.join(root, "manifest.json"), manifest)
    return manifest


def verify(root: str) -> list[str]:
    """Re-hash artifacts against ``manifest.json``; returns a list of problems (empty when clean)."""
    try:
        manifest = read_json(os.path.join(root, "manifest.json"))
    except FileNotFoundError:
        return [f"no manifest.json in {root}"]
    problems = []
    for rel, digest in sorted(manifest["files"].items()):
        path = os.path.join(root, rel)
        if not os.path.exists(path):
            problems.append(f"missing: {rel}")
        elif sha256_file(path) != digest:
            problems.append(f"hash mismatch: {rel}")
    for rel in _artifact_files(root):
        if rel not in manifest["files"]:
            problems.append(f"untracked: {rel}")
    cfg_path = os.path.join(root, "config.json")
    if os.path.exists(cfg_path):
        stored = read_json(cfg_path)
        recomputed = ExperimentConfig.from_json(stored["config"]).hash() if "config" in stored else None
        if recomputed is not None and recomputed != manifest["config_hash"]:
            problems.append("config hash does not match config.json")
    # traces and summaries must carry the same config hash
    for rel in manifest["files"]:
        if rel.endswith(".summary.json") or rel == "summary.json":
            path = os.path.join(root, rel)
            if os.path.exists(path) and read_json(path).get("config_hash") != manifest["config_hash"]:
                problems.append(f"config hash mismatch in {rel}")
    return problems


# ---------------------------------------------------------------------------
# Downstream BO on a benchmark function
# ---------------------------------------------------------------------------


@dataclass
class DownstreamResult:
    function: str
    labels: tuple
    exprs: tuple
    curves: dict  # label -> (seeds, budget) best objective so far (minimization)
    seeds: tuple
    n_init: int

    def mean_std(self, label: str) -> tuple[np.ndarray, np.ndarray]:
        c = self.curves[label]
        return c.mean(axis=0), c.std(axis=0)

    def final_mean(self, label: str) -> float:
        return float(self.mean_std(label)[0][-1])

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "surrogate", "kernel", "mean_best", "std_best", "n_seeds"])
        for label, expr in zip(self.labels, self.exprs):
            m, s = self.mean_std(label)
            for i in range(len(m)):
                w.writerow([i + 1, label, expr, f"{m[i]:.17g}", f"{s[i]:.17g}", len(self.seeds)])
        return buf.getvalue()


def _ei_min(mu, sd, best):
    sd = np.maximum(sd, 1e-12)
    u = (best - mu) / sd
    return (best - mu) * norm.cdf(u) + sd * norm.pdf(u)


def _bo_once(bench, expr: KernelExpr, X0: np.ndarray, budget: int, seed: int, fit_budget: FitBudget,
             n_candidates: int = 256) -> np.ndarray:
    X = X0.copy()
    y = bench(X)
    lo, hi = bench.lower, bench.upper
    for t in range(budget - len(X0)):
        data = Dataset.from_raw(X, y)
        rng_seed = stable_int("downstream", seed, t)
        try:
            model = fit_gp(expr, data, fit_budget, seed=rng_seed % (2**31))
        except NumericalFailure:
            model = None
        cand = sobol_points(np.zeros(bench.dim), np.ones(bench.dim), n_candidates, rng_seed % (2**31))
        if model is None:
            x_next = cand[0]
        else:
            best = float(np.min(data.y))

            def score(u):
                mu, var = posterior_predict(model, np.atleast_2d(u))
                return _ei_min(mu, np.sqrt(var), best)

            ei = score(cand)
            x_next, v_next = cand[int(np.argmax(ei))], float(np.max(ei))
            for k in np.argsort(-ei, kind="stable")[:3]:
                res = minimize(lambda u: -float(score(u)[0]), cand[k], method="L-BFGS-B",
                               bounds=[(0.0, 1.0)] * bench.dim, options={"maxiter": 50})
                if -res.fun > v_next:
                    x_next, v_next = np.clip(res.x, 0.0, 1.0), -float(res.fun)
        x_raw = lo + x_next * (hi - lo)
        X = np.vstack([X, x_raw])
        y = np.append(y, bench(x_raw[None])[0])
    return np.minimum.accumulate(y)


def downstream_bo(function: str, surrogate_expr, baseline_expr, budget: int = 30, seeds=(0, 1, 2, 3, 4),
                  n_init: int = 5, fit_budget: FitBudget | None = None) -> DownstreamResult:
    """Minimize a benchmark with EI under two GP surrogate kernels.

    Both runs of a seed start from the same scrambled-Sobol design and use the
    same acquisition settings; only the kernel differs.
    """
    bench = get_benchmark(function)
    exprs = [parse_expr(e) if isinstance(e, str) else e for e in (surrogate_expr, baseline_expr)]
    if budget < n_init or n_init < 2:
        raise InvalidArgumentError("need budget >= n_init >= 2")
    fit_budget = fit_budget or FitBudget(restarts=4, max_evals=150)
    labels = ("surrogate", "baseline")
    curves = {lab: [] for lab in labels}
    for s in seeds:
        X0 = sobol_points(bench.lower, bench.upper, n_init, seed=int(s))
        for lab, e in zip(labels, exprs):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                curves[lab].append(_bo_once(bench, e, X0, budget, int(s), fit_budget))
    return DownstreamResult(bench.name, labels, tuple(print_expr(e) for e in exprs),
                            {lab: np.array(c) for lab, c in curves.items()}, tuple(seeds), n_init)


__all__ = [
    "BENCHMARKS", "ComparisonSummary", "DatasetSpec", "DownstreamResult", "ExperimentConfig", "METHODS",
    "cached_geometry", "downstream_bo", "run_cell", "run_experiment", "svg_line_chart", "verify",
    "write_manifest",
]
