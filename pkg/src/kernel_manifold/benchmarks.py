"""Classical 2-D test functions and dataset construction from them or from CSV series."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.stats import qmc

from .errors import InvalidArgumentError
from .gp import Dataset


def eggholder(x):
    x = np.atleast_2d(x)
    x1, x2 = x[:, 0], x[:, 1]
    return -(x2 + 47) * np.sin(np.sqrt(np.abs(x2 + x1 / 2 + 47))) - x1 * np.sin(np.sqrt(np.abs(x1 - (x2 + 47))))


def ackley(x, a=20.0, b=0.2, c=2 * math.pi):
    x = np.atleast_2d(x)
    d = x.shape[1]
    s1 = np.sqrt(np.sum(x**2, axis=1) / d)
    s2 = np.sum(np.cos(c * x), axis=1) / d
    return -a * np.exp(-b * s1) - np.exp(s2) + a + math.e


def dropwave(x):
    x = np.atleast_2d(x)
    r2 = np.sum(x**2, axis=1)
    return -(1 + np.cos(12 * np.sqrt(r2))) / (0.5 * r2 + 2)


def schwefel(x):
    x = np.atleast_2d(x)
    return 418.9829 * x.shape[1] - np.sum(x * np.sin(np.sqrt(np.abs(x))), axis=1)


def rastrigin(x):
    x = np.atleast_2d(x)
    return 10 * x.shape[1] + np.sum(x**2 - 10 * np.cos(2 * math.pi * x), axis=1)


def levy(x):
    x = np.atleast_2d(x)
    w = 1 + (x - 1) / 4
    head = np.sin(math.pi * w[:, 0]) ** 2
    mid = np.sum((w[:, :-1] - 1) ** 2 * (1 + 10 * np.sin(math.pi * w[:, :-1] + 1) ** 2), axis=1)
    tail = (w[:, -1] - 1) ** 2 * (1 + np.sin(2 * math.pi * w[:, -1]) ** 2)
    return head + mid + tail


def bukin(x):
    x = np.atleast_2d(x)
    x1, x2 = x[:, 0], x[:, 1]
    return 100 * np.sqrt(np.abs(x2 - 0.01 * x1**2)) + 0.01 * np.abs(x1 + 10)


@dataclass(frozen=True)
class BenchmarkFunction:
    name: str
    fn: Callable
    domain: tuple
    optimum_x: tuple
    optimum_f: float

    @property
    def dim(self) -> int:
        return len(self.domain)

    @property
    def lower(self) -> np.ndarray:
        return np.array([lo for lo, _ in self.domain], dtype=float)

    @property
    def upper(self) -> np.ndarray:
        return np.array([hi for _, hi in self.domain], dtype=float)

    def __call__(self, x):
        return self.fn(np.asarray(x, dtype=float))


BENCHMARKS = {
    b.name: b
    for b in [
        BenchmarkFunction("eggholder", eggholder, ((-512, 512), (-512, 512)), (512.0, 404.2319), -959.6407),
        BenchmarkFunction("ackley", ackley, ((-5, 5), (-5, 5)), (0.0, 0.0), 0.0),
        BenchmarkFunction("dropwave", dropwave, ((-5.12, 5.12), (-5.12, 5.12)), (0.0, 0.0), -1.0),
        BenchmarkFunction("schwefel", schwefel, ((-500, 500), (-500, 500)), (420.9687, 420.9687), 0.0),
        BenchmarkFunction("rastrigin", rastrigin, ((-5.12, 5.12), (-5.12, 5.12)), (0.0, 0.0), 0.0),
        BenchmarkFunction("levy", levy, ((-10, 10), (-10, 10)), (1.0, 1.0), 0.0),
        BenchmarkFunction("bukin", bukin, ((-15, -5), (-3, 3)), (-10.0, 1.0), 0.0),
    ]
}


def get_benchmark(name: str) -> BenchmarkFunction:
    try:
        return BENCHMARKS[name.lower()]
    except KeyError:
        raise InvalidArgumentError(f"unknown benchmark {name!r}; valid names: {', '.join(BENCHMARKS)}") from None


def sobol_points(lower, upper, n: int, seed: int) -> np.ndarray:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        u = qmc.Sobol(len(lower), scramble=True, seed=seed).random(n)
    return qmc.scale(u, lower, upper)


def sample_benchmark(name: str, n: int = 40, seed: int = 0) -> Dataset:
    """``n`` scrambled-Sobol inputs over the function's standard domain, normalized."""
    bench = get_benchmark(name)
    if n < 4:
        raise InvalidArgumentError("n must be >= 4")
    X = sobol_points(bench.lower, bench.upper, n, seed)
    return Dataset.from_raw(X, bench(X), name=bench.name)


@dataclass
class LoadedSeries:
    data: Dataset
    dropped: int


def load_csv_series(path, x_column: str, y_column: str) -> LoadedSeries:
    """Read a two-column series from a CSV with a header row.

    Rows whose x or y is missing or non-finite are dropped and counted; the
    remaining rows are sorted by x.
    """
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        for c in (x_column, y_column):
            if c not in cols:
                raise InvalidArgumentError(f"column {c!r} not in {path} (columns: {cols})")
        xs, ys, dropped = [], [], 0
        for row in reader:
            try:
                x, y = float(row[x_column]), float(row[y_column])
            except (TypeError, ValueError):
                dropped += 1
                continue
            if not (math.isfinite(x) and math.isfinite(y)):
                dropped += 1
                continue
            xs.append(x)
            ys.append(y)
    if not xs:
        raise InvalidArgumentError(f"no usable rows in {path}")
    order = np.argsort(xs, kind="stable")
    X = np.asarray(xs)[order]
    y = np.asarray(ys)[order]
    if len(X) < 2:
        raise InvalidArgumentError(f"{path} has fewer than 2 usable rows")
    return LoadedSeries(Dataset.from_raw(X, y, name=str(path)), dropped)
