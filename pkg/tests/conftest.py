"""Shared fixtures and the acceptance summary printed at the end of the run."""

import numpy as np
import pytest

from kernel_manifold.divergence import ReferenceGrid, build_distance_matrix
from kernel_manifold.grammar import generate_library

# Settings for the depth-3 library geometry used across modules.
GEOMETRY_SEED = 7
GEOMETRY_SAMPLES = 64
N_REF = 50

_ACCEPTANCE = {}


def record_acceptance(criterion: str, passed: bool, detail: str = "") -> None:
    _ACCEPTANCE[criterion] = (bool(passed), detail)


@pytest.fixture(scope="session")
def library3():
    return generate_library(3)


@pytest.fixture(scope="session")
def geometry_cache():
    return {}


def _matrix(cache, library, kind):
    if kind not in cache:
        cache[kind] = build_distance_matrix(library, ReferenceGrid(N_REF), kind, GEOMETRY_SAMPLES, GEOMETRY_SEED)
    return cache[kind]


@pytest.fixture(scope="session")
def js_matrix(library3, geometry_cache):
    return _matrix(geometry_cache, library3, "sqrt_js_sq")


@pytest.fixture(scope="session")
def hellinger_matrix(library3, geometry_cache):
    return _matrix(geometry_cache, library3, "hellinger_sq")


@pytest.fixture(scope="session")
def kl_matrix(library3, geometry_cache):
    return _matrix(geometry_cache, library3, "kl_sym")


@pytest.fixture
def rng():
    return np.random.default_rng(20240531)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(id): end-to-end acceptance criterion")
    config.addinivalue_line("markers", "slow: takes more than a few seconds")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")

    def key(name):
        digits = "".join(ch for ch in name[2:] if ch.isdigit())
        return (int(digits or 0), name)

    for name in sorted(_ACCEPTANCE, key=key):
        ok, detail = _ACCEPTANCE[name]
        tr.write_line(f"{name:6s} {'PASS' if ok else 'FAIL'}  {detail}")
