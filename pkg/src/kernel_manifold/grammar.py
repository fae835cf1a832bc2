"""Compositional kernel grammar: base kernels, canonical expression trees,
library enumeration, a small parser/printer and covariance evaluation."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidArgumentError, ParseError


@dataclass(frozen=True)
class HyperParam:
    name: str
    low: float
    high: float

    def __post_init__(self):
        if not (0 < self.low < self.high < np.inf):
            raise InvalidArgumentError(
                f"bad bounds for {self.name}: [{self.low}, {self.high}]"
            )


@dataclass(frozen=True)
class BaseKernel:
    """A stationary base kernel with unit output variance."""

    kind: str
    schema: tuple[HyperParam, ...]


# Bounds are in units of inputs normalized to [0, 1].
BASE_KERNELS: dict[str, BaseKernel] = {
    "SE": BaseKernel("SE", (HyperParam("lengthscale", 0.1, 2.0),)),
    "PER": BaseKernel(
        "PER",
        (HyperParam("lengthscale", 0.1, 2.0), HyperParam("period", 0.1, 2.0)),
    ),
    "RQ": BaseKernel(
        "RQ",
        (HyperParam("lengthscale", 0.1, 2.0), HyperParam("alpha", 0.1, 10.0)),
    ),
}

DEFAULT_BASES = ("SE", "PER", "RQ")


def register_base_kernel(kernel: BaseKernel, evaluator) -> None:
    """Add a new base kernel kind. ``evaluator(r, *params)`` maps distances to covariances."""
    BASE_KERNELS[kernel.kind] = kernel
    _EVALUATORS[kernel.kind] = evaluator


# ---------------------------------------------------------------------------
# Expression trees
# ---------------------------------------------------------------------------


class KernelExpr:
    """Base class of kernel expression nodes. Nodes are immutable and hashable."""

    __slots__ = ()

    op: str

    @property
    def depth(self) -> int:
        # 1 = single base kernel, 2 = one operation, 3 = two operations, ...
        return self.n_leaves

    @property
    def n_leaves(self) -> int:
        raise NotImplementedError

    def leaves(self) -> list["Leaf"]:
        raise NotImplementedError

    def __str__(self) -> str:
        return print_expr(self)

    def __add__(self, other: "KernelExpr") -> "KernelExpr":
        return Sum((self, other))

    def __mul__(self, other: "KernelExpr") -> "KernelExpr":
        return Product((self, other))

    @property
    def schema(self) -> list[tuple[int, HyperParam]]:
        """Flat hyperparameter layout as (leaf position, HyperParam) in leaf order."""
        out = []
        for i, leaf in enumerate(self.leaves()):
            out.extend((i, hp) for hp in BASE_KERNELS[leaf.kind].schema)
        return out

    @property
    def n_params(self) -> int:
        return sum(len(BASE_KERNELS[lf.kind].schema) for lf in self.leaves())

    def bounds(self) -> np.ndarray:
        """(n_params, 2) array of lower/upper bounds."""
        return np.array([[hp.low, hp.high] for _, hp in self.schema], dtype=float).reshape(-1, 2)


@dataclass(frozen=True)
class Leaf(KernelExpr):
    kind: str

    op = "leaf"

    def __post_init__(self):
        if self.kind not in BASE_KERNELS:
            raise InvalidArgumentError(f"unknown base kernel {self.kind!r}")

    @property
    def n_leaves(self) -> int:
        return 1

    def leaves(self):
        return [self]

    def __str__(self):
        return self.kind


@dataclass(frozen=True)
class _Op(KernelExpr):
    children: tuple[KernelExpr, ...]

    def __post_init__(self):
        if len(self.children) < 2:
            raise InvalidArgumentError(f"{type(self).__name__} needs at least 2 children")

    @property
    def n_leaves(self) -> int:
        return sum(c.n_leaves for c in self.children)

    def leaves(self):
        out = []
        for c in self.children:
            out.extend(c.leaves())
        return out

    def __str__(self):
        return print_expr(self)


@dataclass(frozen=True)
class Sum(_Op):
    op = "+"


@dataclass(frozen=True)
class Product(_Op):
    op = "*"


def canonicalize(expr: KernelExpr) -> KernelExpr:
    """Flatten nested sums/products and sort children by canonical string.

    Only commutativity and associativity are applied; ``SE + SE`` stays as is.
    """
    if isinstance(expr, Leaf):
        return expr
    cls = type(expr)
    flat: list[KernelExpr] = []
    for child in expr.children:
        c = canonicalize(child)
        if type(c) is cls:
            flat.extend(c.children)
        else:
            flat.append(c)
    flat.sort(key=print_expr)
    return cls(tuple(flat))


def is_canonical(expr: KernelExpr) -> bool:
    return canonicalize(expr) == expr


def print_expr(expr: KernelExpr) -> str:
    """Fully parenthesized, left-nested binary rendering, e.g. ``((PER + RQ) + SE)``."""
    if isinstance(expr, Leaf):
        return expr.kind
    parts = [print_expr(c) for c in expr.children]
    text = parts[0]
    for p in parts[1:]:
        text = f"({text} {expr.op} {p})"
    return text


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def _tokenize(text: str) -> list[tuple[str, int]]:
    tokens = []
    i = 0
    while i < len(text):
        c = text[i]
        if c.isspace():
            i += 1
        elif c in "()+*":
            tokens.append((c, i))
            i += 1
        elif c.isalpha():
            j = i
            while j < len(text) and (text[j].isalnum() or text[j] == "_"):
                j += 1
            word = text[i:j]
            # "RBF" is accepted as an alias, it is how SE is often written.
            word = "SE" if word.upper() == "RBF" else word.upper()
            if word not in BASE_KERNELS:
                raise ParseError(f"unknown kernel {text[i:j]!r}", offset=i)
            tokens.append((word, i))
            i = j
        elif c in "×·":
            tokens.append(("*", i))
            i += 1
        else:
            raise ParseError(f"unexpected character {c!r}", offset=i)
    return tokens


def parse_expr(text: str) -> KernelExpr:
    """Parse a kernel expression such as ``((SE + PER) * RQ)``.

    ``*`` binds tighter than ``+``; the result is canonicalized. Offsets in
    :class:`ParseError` are byte offsets into the UTF-8 encoding of ``text``.
    """
    try:
        return _parse(text)
    except ParseError as err:
        offset = len(text[: err.offset].encode("utf-8"))
        raise ParseError(str(err).rsplit(" (at offset", 1)[0], offset) from None


def _parse(text: str) -> KernelExpr:
    tokens = _tokenize(text)
    if not tokens:
        raise ParseError("empty kernel expression", offset=0)
    pos = 0
    end = len(text)

    def peek():
        return tokens[pos] if pos < len(tokens) else (None, end)

    def take(expected=None):
        nonlocal pos
        tok, off = peek()
        if tok is None:
            raise ParseError("unexpected end of input", offset=end)
        if expected is not None and tok != expected:
            raise ParseError(f"expected {expected!r}, found {tok!r}", offset=off)
        pos += 1
        return tok, off

    def atom():
        tok, off = peek()
        if tok == "(":
            take("(")
            node = sum_expr()
            take(")")
            return node
        if tok is None or tok in ")+*":
            raise ParseError(
                "expected a kernel or '('" + ("" if tok is None else f", found {tok!r}"),
                offset=off,
            )
        take()
        return Leaf(tok)

    def prod_expr():
        node = atom()
        while peek()[0] == "*":
            take("*")
            node = Product((node, atom()))
        return node

    def sum_expr():
        node = prod_expr()
        while peek()[0] == "+":
            take("+")
            node = Sum((node, prod_expr()))
        return node

    node = sum_expr()
    tok, off = peek()
    if tok is not None:
        raise ParseError(f"unexpected {tok!r}", offset=off)
    return canonicalize(node)


# ---------------------------------------------------------------------------
# Library enumeration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KernelLibrary:
    exprs: tuple[KernelExpr, ...]
    max_depth: int
    bases: tuple[str, ...]

    def __len__(self):
        return len(self.exprs)

    def __getitem__(self, i):
        return self.exprs[i]

    def __iter__(self):
        return iter(self.exprs)

    def strings(self) -> list[str]:
        return [print_expr(e) for e in self.exprs]

    def index_of(self, expr: KernelExpr | str) -> int:
        key = expr if isinstance(expr, str) else print_expr(canonicalize(expr))
        try:
            return self.strings().index(key)
        except ValueError:
            raise KeyError(key) from None

    def digest(self) -> str:
        from .utils import sha256_text

        return sha256_text("\n".join(self.strings()))

    def manifest(self) -> list[dict]:
        return [
            {
                "index": i,
                "expr": print_expr(e),
                "depth": e.depth,
                "hyperparams": [
                    {"name": hp.name, "low": hp.low, "high": hp.high} for _, hp in e.schema
                ],
            }
            for i, e in enumerate(self.exprs)
        ]

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.manifest(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "KernelLibrary":
        with open(path) as fh:
            entries = json.load(fh)
        exprs = tuple(parse_expr(e["expr"]) for e in sorted(entries, key=lambda e: e["index"]))
        bases = tuple(sorted({lf.kind for e in exprs for lf in e.leaves()}))
        return cls(exprs, max(e.depth for e in exprs), bases)


def generate_library(max_depth: int = 3, bases: Iterable[str] = DEFAULT_BASES) -> KernelLibrary:
    """All canonical sum/product expressions with depth <= ``max_depth``.

    Ordered by (depth, canonical string).
    """
    bases = tuple(sorted(set(bases)))
    if not bases:
        raise InvalidArgumentError("base kernel set is empty")
    if max_depth < 1:
        raise InvalidArgumentError(f"max_depth must be >= 1, got {max_depth}")
    by_size: dict[int, dict[str, KernelExpr]] = {1: {b: Leaf(b) for b in bases}}
    for size in range(2, max_depth + 1):
        found: dict[str, KernelExpr] = {}
        for left in range(1, size // 2 + 1):
            for a in by_size[left].values():
                for b in by_size[size - left].values():
                    for cls in (Sum, Product):
                        e = canonicalize(cls((a, b)))
                        found.setdefault(print_expr(e), e)
        by_size[size] = found
    exprs = []
    for size in sorted(by_size):
        exprs.extend(by_size[size][k] for k in sorted(by_size[size]))
    return KernelLibrary(tuple(exprs), max_depth, bases)


# ---------------------------------------------------------------------------
# Covariance evaluation
# ---------------------------------------------------------------------------


def _se(r, ell):
    return np.exp(-0.5 * (r / ell) ** 2)


def _per(r, ell, period):
    return np.exp(-2.0 * np.sin(np.pi * r / period) ** 2 / ell**2)


def _rq(r, ell, alpha):
    return (1.0 + r**2 / (2.0 * alpha * ell**2)) ** (-alpha)


_EVALUATORS = {"SE": _se, "PER": _per, "RQ": _rq}


def pairwise_distances(X1, X2=None) -> np.ndarray:
    X1 = as_points(X1)
    X2 = X1 if X2 is None else as_points(X2)
    diff = X1[:, None, :] - X2[None, :, :]
    return np.sqrt(np.sum(diff**2, axis=-1))


def as_points(X) -> np.ndarray:
    """Coerce a list of scalars or an (n, d) array to an (n, d) float array."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return X


def covariance_from_distances(expr: KernelExpr, theta, r: np.ndarray) -> np.ndarray:
    """Covariance from a precomputed distance matrix.

    ``theta`` may be a vector of shape (P,) or a batch of shape (S, P); the
    result then has shape ``r.shape`` or ``(S,) + r.shape``.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.shape[-1] != expr.n_params:
        raise InvalidArgumentError(
            f"{print_expr(expr)} expects {expr.n_params} hyperparameters, got {theta.shape[-1]}"
        )
    batched = theta.ndim == 2
    cursor = 0

    def ev(node):
        nonlocal cursor
        if isinstance(node, Leaf):
            k = len(BASE_KERNELS[node.kind].schema)
            params = theta[..., cursor : cursor + k]
            cursor += k
            if batched:
                params = params[:, :, None, None]
                return _EVALUATORS[node.kind](r[None], *np.moveaxis(params, 1, 0))
            return _EVALUATORS[node.kind](r, *params)
        mats = [ev(c) for c in node.children]
        out = mats[0]
        for m in mats[1:]:
            out = out + m if isinstance(node, Sum) else out * m
        return out

    return ev(expr)


def eval_covariance(expr: KernelExpr, theta, X, X2=None) -> np.ndarray:
    """Covariance matrix of ``expr`` with hyperparameters ``theta`` at points ``X``.

    Sums add child matrices and products multiply them elementwise. Every leaf
    has unit variance, so a sum of m leaves has m on the diagonal.
    """
    X = as_points(X)
    if X.shape[0] == 0:
        raise InvalidArgumentError("no input points")
    theta = check_theta(expr, theta)
    r = pairwise_distances(X, None if X2 is None else as_points(X2))
    return covariance_from_distances(expr, theta, r)


def check_theta(expr: KernelExpr, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    b = expr.bounds()
    if theta.shape != (len(b),):
        raise InvalidArgumentError(
            f"{print_expr(expr)} expects {len(b)} hyperparameters, got shape {theta.shape}"
        )
    # small slack so values round-tripped through log space still pass
    slack = 1e-9 * b[:, 1]
    bad = np.flatnonzero(~((theta >= b[:, 0] - slack) & (theta <= b[:, 1] + slack)))
    if bad.size:
        names = [h.name for _, h in expr.schema]
        i = int(bad[0])
        raise InvalidArgumentError(
            f"{print_expr(expr)}: {names[i]} = {theta[i]:g} outside [{b[i, 0]:g}, {b[i, 1]:g}]"
        )
    return theta


def library_from_strings(strings: Sequence[str]) -> KernelLibrary:
    exprs = tuple(parse_expr(s) for s in strings)
    bases = tuple(sorted({lf.kind for e in exprs for lf in e.leaves()}))
    return KernelLibrary(exprs, max(e.depth for e in exprs), bases)
