"""Divergences between zero-mean Gaussian priors, matrix builds, transforms and Gram spectra."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from kernel_manifold.divergence import (
    DistanceMatrix,
    GaussianPrior,
    ReferenceGrid,
    build_distance_matrix,
    double_center,
    gram_spectrum,
    hellinger_sq,
    hyperparameter_draws,
    js,
    kl,
    transform_chordal,
    transform_log1p,
    transform_log_eps,
)
from kernel_manifold.errors import InvalidArgumentError
from kernel_manifold.grammar import Leaf, generate_library, library_from_strings

LOG2 = math.log(2)


def prior1(var):
    return GaussianPrior.from_cov(np.array([[var]]), jitter=0.0)


def random_spd(rng, n):
    A = rng.standard_normal((n, n))
    return A @ A.T / n + 0.1 * np.eye(n)


def js_quadrature_1d(a, b):
    """Exact 1-D JS by adaptive quadrature (oracle)."""
    sa, sb = math.sqrt(a), math.sqrt(b)

    def integrand(x, s_self):
        lp = stats.norm.logpdf(x, scale=s_self)
        la, lb = stats.norm.logpdf(x, scale=sa), stats.norm.logpdf(x, scale=sb)
        lm = np.logaddexp(la, lb) - LOG2
        return math.exp(lp) * (lp - lm)

    lim = 40 * max(sa, sb)
    ka = integrate.quad(integrand, -lim, lim, args=(sa,), limit=400, points=[0.0])[0]
    kb = integrate.quad(integrand, -lim, lim, args=(sb,), limit=400, points=[0.0])[0]
    return 0.5 * (ka + kb)


class TestClosedForms:
    def test_hellinger_scalar(self):
        assert hellinger_sq(prior1(1.0), prior1(9.0)) == pytest.approx(1 - math.sqrt(0.6), abs=1e-12)
        assert hellinger_sq(prior1(1.0), prior1(9.0)) == pytest.approx(0.225403, abs=1e-6)

    def test_kl_scalar(self):
        assert kl(prior1(1.0), prior1(4.0)) == pytest.approx(0.5 * (0.25 - 1 + math.log(4)), abs=1e-12)
        assert kl(prior1(1.0), prior1(4.0)) == pytest.approx(0.318147, abs=1e-6)

    def test_identical(self, rng):
        p = GaussianPrior.from_cov(random_spd(rng, 6))
        assert hellinger_sq(p, p) == pytest.approx(0.0, abs=1e-12)
        assert kl(p, p) == pytest.approx(0.0, abs=1e-12)
        assert js(p, p) == 0.0

    @pytest.mark.parametrize("seed", range(10))
    def test_multivariate_against_determinants(self, seed):
        rng = np.random.default_rng(seed)
        A, B = random_spd(rng, 5), random_spd(rng, 5)
        p, q = GaussianPrior.from_cov(A, 0.0), GaussianPrior.from_cov(B, 0.0)
        bc = np.linalg.det(A) ** 0.25 * np.linalg.det(B) ** 0.25 / np.linalg.det((A + B) / 2) ** 0.5
        assert hellinger_sq(p, q) == pytest.approx(1 - bc, abs=1e-10)
        ref = 0.5 * (np.trace(np.linalg.inv(B) @ A) - 5 + math.log(np.linalg.det(B) / np.linalg.det(A)))
        assert kl(p, q) == pytest.approx(ref, abs=1e-10)
        assert hellinger_sq(p, q) == hellinger_sq(q, p)

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            kl(prior1(1.0), GaussianPrior.from_cov(np.eye(2)))


class TestJensenShannon:
    def test_symmetric_by_construction(self, rng):
        p, q = GaussianPrior.from_cov(random_spd(rng, 4)), GaussianPrior.from_cov(random_spd(rng, 4))
        assert js(p, q, 128, seed=3) == js(q, p, 128, seed=3)

    def test_deterministic(self, rng):
        p, q = GaussianPrior.from_cov(random_spd(rng, 4)), GaussianPrior.from_cov(random_spd(rng, 4))
        assert js(p, q, 64, seed=1) == js(p, q, 64, seed=1)

    @pytest.mark.parametrize("a,b", [(1.0, 4.0), (0.3, 2.0), (1.0, 25.0)])
    def test_quadrature_oracle(self, a, b):
        est, se = js(prior1(a), prior1(b), mc_samples=20000, seed=5, return_se=True)
        assert abs(est - js_quadrature_1d(a, b)) <= 4 * se

    def test_wide_variance_ratio(self):
        p, q = prior1(1.0), prior1(1e4)
        est, se = js(p, q, mc_samples=4096, seed=0, return_se=True)
        rng = np.random.default_rng(99)
        n = 10**6
        xs = [rng.normal(0, 1, n), rng.normal(0, 100, n)]
        terms = []
        for x, s in zip(xs, (1.0, 100.0)):
            lp = stats.norm.logpdf(x, scale=s)
            lm = np.logaddexp(stats.norm.logpdf(x, scale=1.0), stats.norm.logpdf(x, scale=100.0)) - LOG2
            terms.append(lp - lm)
        oracle = 0.5 * (terms[0].mean() + terms[1].mean())
        se_oracle = 0.5 * math.sqrt((terms[0].var() + terms[1].var()) / n)
        assert abs(est - oracle) <= 2 * math.hypot(se, se_oracle)
        assert oracle > 0.9 * LOG2

    def test_bounded_and_jeffreys(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            p, q = GaussianPrior.from_cov(random_spd(rng, 3)), GaussianPrior.from_cov(random_spd(rng, 3))
            v, se = js(p, q, 512, seed=2, return_se=True)
            assert 0.0 <= v <= LOG2
            assert kl(p, q) + kl(q, p) >= 2 * v - 3 * se

    def test_sqrt_js_triangle(self):
        grid = ReferenceGrid(10)
        lib = generate_library(2)
        rng = np.random.default_rng(12)
        priors = []
        for _ in range(30):
            e = lib[int(rng.integers(len(lib)))]
            b = e.bounds()
            priors.append(GaussianPrior.from_kernel(e, b[:, 0] + rng.random(len(b)) * (b[:, 1] - b[:, 0]), grid))
        cache = {}

        def d(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                v, se = js(priors[key[0]], priors[key[1]], 256, seed=0, return_se=True)
                cache[key] = (math.sqrt(v), se / (2 * math.sqrt(max(v, 1e-12))))
            return cache[key]

        for _ in range(1000):
            a, b, c = rng.choice(30, 3, replace=False)
            (ac, s1), (ab, s2), (bc, s3) = d(a, c), d(a, b), d(b, c)
            assert ac <= ab + bc + 3 * (s1 + s2 + s3)


class TestDistanceMatrix:
    def test_single_kernel(self):
        D = build_distance_matrix(library_from_strings(["SE"]), ReferenceGrid(10), "hellinger_sq", 8, 0)
        assert D.D.shape == (1, 1) and D.D[0, 0] == 0.0

    @pytest.mark.parametrize("kind", ["hellinger_sq", "kl_sym", "js", "sqrt_js_sq"])
    def test_structure_and_determinism(self, kind):
        lib = generate_library(2)
        a = build_distance_matrix(lib, ReferenceGrid(12), kind, 8, 3, mc_samples=32)
        b = build_distance_matrix(lib, ReferenceGrid(12), kind, 8, 3, mc_samples=32)
        assert np.array_equal(a.D, b.D)
        assert np.all(np.diag(a.D) == 0) and np.array_equal(a.D, a.D.T)
        assert np.all(np.isfinite(a.D)) and np.all(a.D >= 0)
        if kind in ("js", "sqrt_js_sq"):
            assert a.D.max() <= LOG2
        if kind == "hellinger_sq":
            assert a.D.max() <= 1.0

    def test_parallel_matches_serial(self):
        lib = generate_library(2)
        a = build_distance_matrix(lib, ReferenceGrid(10), "sqrt_js_sq", 4, 1, mc_samples=16)
        b = build_distance_matrix(lib, ReferenceGrid(10), "sqrt_js_sq", 4, 1, mc_samples=16, workers=2)
        assert np.array_equal(a.D, b.D)

    def test_entry_is_draw_average(self):
        lib = generate_library(2)
        grid = ReferenceGrid(15)
        D = build_distance_matrix(lib, grid, "kl_sym", 6, 9)
        draws = hyperparameter_draws(lib, 6, 9)
        i, j = 2, 7
        vals = []
        for s in range(6):
            p = GaussianPrior.from_kernel(lib[i], draws[i][s], grid)
            q = GaussianPrior.from_kernel(lib[j], draws[j][s], grid)
            vals.append((0.5 * (kl(p, q) + kl(q, p))) ** 2)
        assert D.D[i, j] == pytest.approx(np.mean(vals), rel=1e-9)

    def test_two_se_copies_against_mc(self):
        # A library cannot hold SE twice, so two independent SE draw blocks are
        # taken from a two-member library and both evaluated as plain SE.
        grid = ReferenceGrid(20)
        draws = hyperparameter_draws(library_from_strings(["SE", "(SE * SE)"]), 256, 4)
        qmc = np.mean([hellinger_sq(GaussianPrior.from_kernel(Leaf("SE"), [draws[0][s, 0]], grid),
                                    GaussianPrior.from_kernel(Leaf("SE"), [draws[1][s, 0]], grid))
                       for s in range(256)])
        rng = np.random.default_rng(0)
        ells = rng.uniform(0.1, 2.0, (10_000, 2))
        ell_grid = np.linspace(0.1, 2.0, 400)
        priors = [GaussianPrior.from_kernel(Leaf("SE"), [e], grid) for e in ell_grid]
        # nearest-grid lookup keeps the 10^4-sample oracle cheap; error is far below the MC SE
        idx = np.clip(np.searchsorted(ell_grid, ells), 0, 399)
        table = {}
        samples = []
        for a, b in idx:
            key = (min(a, b), max(a, b))
            if key not in table:
                table[key] = hellinger_sq(priors[key[0]], priors[key[1]])
            samples.append(table[key])
        samples = np.array(samples)
        se = samples.std(ddof=1) / math.sqrt(len(samples))
        assert qmc > 0
        assert abs(qmc - samples.mean()) <= 3 * se + 2e-3

    def test_save_load_roundtrip(self, tmp_path):
        lib = generate_library(2)
        D = build_distance_matrix(lib, ReferenceGrid(10), "hellinger_sq", 4, 0)
        D.save(tmp_path / "D.csv")
        back = DistanceMatrix.load(tmp_path / "D.csv")
        assert np.array_equal(back.D, D.D)
        assert back.kind == "hellinger_sq" and back.samples == 4 and back.library_hash == lib.digest()

    def test_bad_kind(self):
        with pytest.raises(InvalidArgumentError):
            build_distance_matrix(generate_library(1), ReferenceGrid(5), "wasserstein", 2, 0)


class TestTransforms:
    def test_log1p(self):
        D = np.array([[0.0, math.e - 1], [math.e - 1, 0.0]])
        out = transform_log1p(D).D
        assert out[0, 0] == 0.0 and out[0, 1] == pytest.approx(1.0)

    def test_log_eps(self):
        D = np.array([[0.0, 1.0], [1.0, 0.0]])
        out = transform_log_eps(D, 1e-3).D
        assert out[0, 0] == 0.0
        assert out[0, 1] == pytest.approx(math.log((1 + 1e-3) / 1e-3))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0, 1e3), min_size=6, max_size=6))
    def test_monotone(self, vals):
        M = np.zeros((4, 4))
        M[np.triu_indices(4, 1)] = vals
        M = M + M.T
        for f in (transform_log1p, lambda x: transform_log_eps(x, 1e-8)):
            out = f(M).D
            iu = np.triu_indices(4, 1)
            order = np.argsort(M[iu], kind="stable")
            assert np.all(np.diff(out[iu][order]) >= 0)

    def test_chordal(self):
        D = np.array([[0.0, math.pi, math.pi / 2], [math.pi, 0.0, math.pi / 2], [math.pi / 2, math.pi / 2, 0.0]])
        out = transform_chordal(D).D
        assert out[0, 0] == 0.0
        assert out[0, 1] == pytest.approx(4.0)
        assert out[0, 2] == pytest.approx(2.0)
        with pytest.raises(InvalidArgumentError):
            transform_chordal(np.array([[0.0, 3.2], [3.2, 0.0]]))

    def test_transform_tag(self):
        D = build_distance_matrix(generate_library(1), ReferenceGrid(5), "hellinger_sq", 2, 0)
        assert transform_log1p(D).transform == "log1p"


class TestGram:
    def test_collinear(self):
        D = np.array([[0.0, 1, 4], [1, 0, 1], [4, 1, 0]])
        spec = gram_spectrum(D)
        np.testing.assert_allclose(spec.eigenvalues, [2, 0, 0], atol=1e-12)

    def test_reconstruction(self, rng):
        P = rng.standard_normal((12, 3))
        D = ((P[:, None] - P[None]) ** 2).sum(-1)
        spec = gram_spectrum(D)
        np.testing.assert_allclose(spec.reconstruct(), double_center(D), atol=1e-8)
        J = np.eye(12) - 1 / 12
        np.testing.assert_allclose(double_center(D), -0.5 * J @ D @ J, atol=1e-10)
        assert len(spec.eigenvalues) == 12
        assert np.all(np.diff(spec.eigenvalues) <= 0)

    def test_sphere_geodesic_not_euclidean(self):
        rng = np.random.default_rng(0)
        P = rng.standard_normal((40, 3))
        P /= np.linalg.norm(P, axis=1, keepdims=True)
        G = np.arccos(np.clip(P @ P.T, -1, 1))
        spec = gram_spectrum(G**2)
        assert spec.min_eigenvalue < -1e-3 * spec.max_eigenvalue
        chord = gram_spectrum(transform_chordal(G).D)
        assert chord.min_eigenvalue >= -1e-8 * chord.max_eigenvalue
