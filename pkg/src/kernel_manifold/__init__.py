"""Kernel search on a Euclidean embedding of compositional GP kernels."""

from .grammar import (
    BASE_KERNELS,
    KernelExpr,
    KernelLibrary,
    Leaf,
    Product,
    Sum,
    canonicalize,
    eval_covariance,
    generate_library,
    parse_expr,
    print_expr,
)

__version__ = "0.1.0"

__all__ = [
    "BASE_KERNELS",
    "KernelExpr",
    "KernelLibrary",
    "Leaf",
    "Product",
    "Sum",
    "canonicalize",
    "eval_covariance",
    "generate_library",
    "parse_expr",
    "print_expr",
]
