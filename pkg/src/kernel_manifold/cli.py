"""``kernel-manifold`` command-line entry point."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .benchmarks import BENCHMARKS, load_csv_series, sample_benchmark
from .bo import SurrogateConfig, run_bo, run_random
from .divergence import KINDS, DistanceMatrix, ReferenceGrid, build_distance_matrix, gram_spectrum, transform_log1p, transform_log_eps
from .embedding import Embedding, classical_mds, reconstruction_curve, select_dimension
from .errors import KernelManifoldError
from .experiment import ExperimentConfig, downstream_bo, run_experiment, svg_line_chart, verify
from .ga import GAAborted, GAConfig, LLMClient, LLMProposer, MockProposer, run_ga
from .gp import CachedObjective, FitBudget
from .grammar import KernelLibrary, generate_library
from .utils import config_hash, write_json


def _add_dataset_args(p):
    g = p.add_argument_group("dataset")
    g.add_argument("--benchmark", choices=sorted(BENCHMARKS), help="synthetic function to sample")
    g.add_argument("--n", type=int, default=40, help="sample count for --benchmark (default 40)")
    g.add_argument("--data-seed", type=int, default=0)
    g.add_argument("--csv", "--data", dest="csv", help="CSV series with a header row")
    g.add_argument("--x-column", default="x")
    g.add_argument("--y-column", default="y")


def _dataset(args):
    if (args.benchmark is None) == (args.csv is None):
        raise SystemExit("error: pass exactly one of --benchmark or --csv")
    if args.benchmark:
        return sample_benchmark(args.benchmark, args.n, args.data_seed), {"benchmark": args.benchmark, "n": args.n, "seed": args.data_seed}
    series = load_csv_series(args.csv, args.x_column, args.y_column)
    if series.dropped:
        print(f"dropped {series.dropped} rows with missing or non-finite values", file=sys.stderr)
    return series.data, {"csv": args.csv, "n": series.data.n, "dropped": series.dropped}


def _seeds(text: str) -> list[int]:
    """``3``, ``1,2,5`` or an inclusive range ``1..5``."""
    out = []
    for part in str(text).split(","):
        if ".." in part:
            lo, hi = part.split("..")
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    if not out:
        raise ValueError(f"no seeds in {text!r}")
    return out


def _prefix(out: str, method: str, seed: int, many: bool) -> str:
    """Trace prefix: ``out`` itself for one seed, else ``out/<method>_seed<s>``."""
    if many or out.endswith(("/", os.sep)) or os.path.isdir(out):
        os.makedirs(out, exist_ok=True)
        return os.path.join(out, f"{method}_seed{seed}")
    parent = os.path.dirname(out)
    if parent:
        os.makedirs(parent, exist_ok=True)
    return out


def _matrix_path(args) -> str:
    path = args.matrix_opt or args.matrix
    if not path:
        raise SystemExit("error: pass the matrix CSV (positional or --matrix)")
    return path


def _args_hash(args, *skip) -> str:
    return config_hash({k: v for k, v in vars(args).items() if k != "func" and k not in skip})


def _library(path, depth):
    return KernelLibrary.load(path) if path else generate_library(depth)


def cmd_library(args):
    lib = generate_library(args.depth, tuple(args.bases.split(",")))
    lib.save(args.out)
    print(f"{len(lib)} kernels (depth <= {args.depth}) -> {args.out}  sha256 {lib.digest()[:12]}")


def cmd_distances(args):
    lib = _library(args.library, args.depth)
    D = build_distance_matrix(lib, ReferenceGrid(args.n_ref), args.kind, args.samples, args.seed, args.mc, workers=args.workers)
    if args.transform == "log1p":
        D = transform_log1p(D)
    elif args.transform == "log_eps":
        D = transform_log_eps(D, args.eps)
    D.save(args.out, {"config_hash": _args_hash(args, "out", "workers")})
    off = D.off_diagonal()
    print(f"{args.kind} matrix {D.N}x{D.N} -> {args.out}; off-diagonal median {np.median(off):.6g}, clamps {D.clamp_count}")


def cmd_diagnose(args):
    D = DistanceMatrix.load(_matrix_path(args))
    summary = gram_spectrum(D).summary(args.top)
    text = json.dumps(summary, indent=2, sort_keys=True)
    if args.out:
        write_json(args.out, summary)
    print(text)


def cmd_embed(args):
    D = DistanceMatrix.load(_matrix_path(args))
    emb = classical_mds(D, args.p)
    emb.save(args.out, {"matrix_hash": D.digest()})
    msg = f"embedding {emb.Z.shape[0]}x{emb.p} -> {args.out}; dropped negative mass {emb.dropped_negative_mass:.3g}"
    if emb.reduced:
        msg += f" (only {emb.p} positive eigenvalues, {args.p} requested)"
    print(msg)
    if args.curve:
        curve = reconstruction_curve(D, args.p_max or D.N - 1)
        with open(args.curve, "w") as fh:
            fh.write("k,mae\n")
            for k, e in curve.rows():
                fh.write(f"{k},{e:.17g}\n")
        print(f"reconstruction curve -> {args.curve}; selected dimension at tol {args.tol}: {select_dimension(curve, args.tol)}")


def cmd_search(args):
    data, meta = _dataset(args)
    lib = _library(args.library, args.depth)
    seeds = _seeds(args.seed)
    if args.method != "random" and not args.embedding:
        raise SystemExit("error: --embedding is required for BO methods")
    emb = Embedding.load(args.embedding) if args.method != "random" else None
    objective = CachedObjective(data, FitBudget(args.restarts, args.max_evals), args.fit_seed)
    extra = {"config_hash": _args_hash(args, "out"), "dataset": meta, "dataset_hash": data.digest()}
    for seed in seeds:
        if args.method == "random":
            trace = run_random(lib, budget=args.n_init + args.iters, seed=seed, objective=objective)
        else:
            sc = SurrogateConfig(kind="rbf" if args.method == "bo_rbf" else "multiscale", M=args.components)
            trace = run_bo(lib, emb, config=sc, n_init=args.n_init, iters=args.iters, seed=seed, mode=args.mode,
                           objective=objective)
        prefix = _prefix(args.out, args.method, seed, len(seeds) > 1)
        trace.save(prefix, extra)
        print(f"{args.method} seed {seed}: best LML {trace.best_lml:.4f} with {trace.best_expr} "
              f"after {len(trace.records)} fits -> {prefix}.jsonl")


def cmd_ga_search(args):
    data, meta = _dataset(args)
    max_depth = None if args.unrestricted else args.max_depth
    seeds = _seeds(args.seed)
    extra = {"config_hash": _args_hash(args, "out"), "dataset": meta, "proposer": args.proposer}
    client = None
    if args.proposer == "llm":
        mode = "replay" if args.replay else "live"
        client = LLMClient.from_env(temperature=args.temperature, replay_log=args.replay_log, mode=mode)
    for seed in seeds:
        cfg = GAConfig(population=args.population, crossovers=args.crossovers, mutation_prob=args.p,
                       max_depth=max_depth, temperature=args.temperature, iterations=args.iters, seed=seed,
                       max_evaluations=args.max_evaluations)
        proposer = MockProposer(seed) if client is None else LLMProposer(client)
        prefix = _prefix(args.out, "ga", seed, len(seeds) > 1)
        try:
            trace = run_ga(data, cfg, proposer, fit_budget=FitBudget(args.restarts, args.max_evals),
                           fit_seed=args.fit_seed)
        except GAAborted as err:
            err.trace.flags.append(f"aborted: {err}")
            err.trace.save(prefix, extra)
            print(f"GA aborted: {err}; partial trace with {len(err.trace.records)} evaluations -> {prefix}.jsonl",
                  file=sys.stderr)
            return 1
        trace.save(prefix, extra)
        print(f"ga seed {seed}: best LML {trace.best_lml:.4f} with {trace.best_expr} after {len(trace.records)} fits "
              f"({sum('rejected' in f for f in trace.flags)} rejected proposals) -> {prefix}.jsonl")


def cmd_bench(args):
    with open(args.config) as fh:
        obj = json.load(fh)
    if args.out_dir:
        obj["out_dir"] = args.out_dir
    if args.workers:
        obj["workers"] = args.workers
    cfg = ExperimentConfig.from_json(obj)
    summary = run_experiment(cfg)
    for ds, ms in summary.stats.items():
        for m, s in sorted(ms.items()):
            print(f"{ds:24s} {m:14s} best LML at {summary.budget} fits: {s.mean[-1]:10.4f} +- {s.std[-1]:.4f} "
                  f"({s.completed} seeds, {s.failed} failed)")
    print(f"results -> {cfg.out_dir}")


def cmd_downstream(args):
    seeds = tuple(int(s) for s in args.seeds.split(","))
    res = downstream_bo(args.function, args.surrogate, args.baseline, args.budget, seeds, args.n_init)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    with open(args.out, "w") as fh:
        fh.write(res.csv_text())
    if args.svg:
        series = {f"{lab}: {e}": res.mean_std(lab) for lab, e in zip(res.labels, res.exprs)}
        with open(args.svg, "w") as fh:
            fh.write(svg_line_chart(series, f"{res.function} downstream BO", ylabel="best objective"))
    for lab, e in zip(res.labels, res.exprs):
        m, s = res.mean_std(lab)
        print(f"{lab:10s} {e:24s} final best {m[-1]:.6g} +- {s[-1]:.3g}")
    print(f"curves -> {args.out}")


def cmd_verify(args):
    problems = verify(args.directory)
    if problems:
        for p in problems:
            print(p)
        return 1
    print(f"{args.directory}: all artifacts match manifest")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="kernel-manifold", description="Kernel search over an embedded space of GP kernels.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("library", help="enumerate the canonical kernel library")
    p.add_argument("--max-depth", "--depth", dest="depth", type=int, default=3)
    p.add_argument("--bases", default="SE,PER,RQ")
    p.add_argument("--out", default="library.json")
    p.set_defaults(func=cmd_library)

    p = sub.add_parser("distances", help="expected pairwise divergences between kernel priors")
    p.add_argument("--library", help="library JSON (default: generate from --depth)")
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--kind", choices=KINDS, default="sqrt_js_sq")
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--n-ref", type=int, default=50)
    p.add_argument("--mc", type=int, default=256, help="Monte Carlo draws per JS estimate")
    p.add_argument("--transform", choices=("none", "log1p", "log_eps"), default="none")
    p.add_argument("--eps", type=float, default=1e-8)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", default="distances.csv")
    p.set_defaults(func=cmd_distances)

    p = sub.add_parser("diagnose", help="Gram spectrum of a squared-distance matrix")
    p.add_argument("matrix", nargs="?")
    p.add_argument("--matrix", dest="matrix_opt", metavar="PATH")
    p.add_argument("--top", type=int, default=10)
    p.add_argument("--out")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("embed", help="classical MDS coordinates")
    p.add_argument("matrix", nargs="?")
    p.add_argument("--matrix", dest="matrix_opt", metavar="PATH")
    p.add_argument("--dim", "--p", dest="p", type=int, default=15)
    p.add_argument("--out", default="embedding.csv")
    p.add_argument("--curve", nargs="?", const="curve.csv",
                   help="also write the reconstruction-error curve (default file curve.csv)")
    p.add_argument("--max-dim", "--p-max", dest="p_max", type=int)
    p.add_argument("--tol", type=float, default=0.05)
    p.set_defaults(func=cmd_embed)

    for name, helptext in (("search", "BO or random search over the library"), ("ga-search", "genetic search baseline")):
        p = sub.add_parser(name, help=helptext)
        _add_dataset_args(p)
        p.add_argument("--seed", default="0", help="one seed, a list 1,2,3 or a range 1..5")
        p.add_argument("--iters", type=int, default=12)
        p.add_argument("--restarts", type=int, default=8, help="GP fit restarts")
        p.add_argument("--max-evals", type=int, default=200, help="GP fit evaluations per restart")
        p.add_argument("--fit-seed", type=int, default=0)
        p.add_argument("--out", required=True,
                       help="trace prefix; a directory (trailing /) or several seeds give <out>/<method>_seed<s>")
        if name == "search":
            p.add_argument("--method", choices=("bo_multiscale", "bo_rbf", "random"), default="bo_multiscale")
            p.add_argument("--library")
            p.add_argument("--depth", type=int, default=3)
            p.add_argument("--embedding")
            p.add_argument("--n-init", type=int, default=3)
            p.add_argument("--mode", choices=("continuous_snap", "discrete_argmax"), default="continuous_snap")
            p.add_argument("--components", type=int, default=3)
            p.set_defaults(func=cmd_search)
        else:
            p.add_argument("--proposer", choices=("mock", "llm"), default="mock")
            p.add_argument("--replay", action="store_true", help="serve LLM responses from --replay-log")
            p.add_argument("--replay-log")
            p.add_argument("--population", type=int, default=6)
            p.add_argument("--crossovers", type=int, default=1)
            p.add_argument("--p", type=float, default=0.7, help="mutation probability")
            p.add_argument("--max-depth", type=int, default=3)
            p.add_argument("--unrestricted", action="store_true")
            p.add_argument("--temperature", type=float, default=0.7)
            p.add_argument("--max-evaluations", type=int)
            p.set_defaults(func=cmd_ga_search)

    p = sub.add_parser("bench", help="run a JSON-configured method comparison")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("downstream-bo", help="minimize a benchmark with two surrogate kernels")
    p.add_argument("--function", choices=sorted(BENCHMARKS), default="ackley")
    p.add_argument("--surrogate", default="SE * (RQ + RQ)")
    p.add_argument("--baseline", default="SE")
    p.add_argument("--budget", type=int, default=30)
    p.add_argument("--n-init", type=int, default=5)
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--out", default="downstream.csv")
    p.add_argument("--svg")
    p.set_defaults(func=cmd_downstream)

    p = sub.add_parser("verify", help="re-hash a results directory against its manifest")
    p.add_argument("directory")
    p.set_defaults(func=cmd_verify)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        rc = args.func(args)
    except KernelManifoldError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    return rc or 0


if __name__ == "__main__":
    sys.exit(main())
