"""Classical MDS, reconstruction curves, dimension selection and k-means validation."""

import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kernel_manifold.divergence import double_center, transform_chordal
from kernel_manifold.embedding import (
    Embedding,
    classical_mds,
    kmeans_validate,
    lloyd_kmeans,
    reconstruction_curve,
    select_dimension,
)
from kernel_manifold.errors import DegenerateGeometryError, InvalidArgumentError


def sq_dists(P):
    return ((P[:, None] - P[None]) ** 2).sum(-1)


def sphere_geodesics(n=40, seed=0):
    rng = np.random.default_rng(seed)
    P = rng.standard_normal((n, 3))
    P /= np.linalg.norm(P, axis=1, keepdims=True)
    return np.arccos(np.clip(P @ P.T, -1.0, 1.0))


class TestClassicalMDS:
    def test_equilateral(self):
        D = np.ones((3, 3)) - np.eye(3)
        emb = classical_mds(D, 2)
        assert emb.p == 2
        np.testing.assert_allclose(emb.pairwise(), 1.0, atol=1e-10)

    def test_collinear(self):
        D = np.array([[0.0, 1, 4], [1, 0, 1], [4, 1, 0]])
        emb = classical_mds(D, 3)
        assert emb.p == 1 and emb.reduced
        np.testing.assert_allclose(np.sort(emb.Z[:, 0]), [-1, 0, 1], atol=1e-12)
        # largest-magnitude entry is made positive
        assert emb.Z[np.argmax(np.abs(emb.Z[:, 0])), 0] > 0

    @pytest.mark.parametrize("seed,rank", [(0, 2), (1, 4), (2, 6)])
    def test_isometry_at_rank(self, seed, rank):
        rng = np.random.default_rng(seed)
        D = sq_dists(rng.standard_normal((25, rank)))
        emb = classical_mds(D, rank)
        iu = np.triu_indices(25, 1)
        np.testing.assert_allclose(emb.pairwise(), np.sqrt(D[iu]), rtol=1e-6)

    def test_gram_identity(self, rng):
        D = sq_dists(rng.standard_normal((10, 3)))
        emb = classical_mds(D, 3)
        B = emb.Z @ emb.Z.T
        np.testing.assert_allclose(B, double_center(D), atol=1e-10)

    def test_duplicate_rows(self, rng):
        P = rng.standard_normal((8, 3))
        P = np.vstack([P, P[2]])
        emb = classical_mds(sq_dists(P), 3)
        np.testing.assert_allclose(emb.Z[2], emb.Z[8], atol=1e-8)

    def test_negative_mass_reported(self):
        emb = classical_mds(sphere_geodesics() ** 2, 5)
        assert emb.dropped_negative_mass > 1e-3
        assert np.all(emb.eigenvalues > 0)

    def test_degenerate(self):
        with pytest.raises(DegenerateGeometryError):
            classical_mds(np.zeros((4, 4)), 2)
        with pytest.raises(InvalidArgumentError):
            classical_mds(np.zeros((4, 4)), 0)

    def test_save_load(self, tmp_path, rng):
        emb = classical_mds(sq_dists(rng.standard_normal((6, 2))), 2)
        emb.save(tmp_path / "Z.csv")
        back = Embedding.load(tmp_path / "Z.csv")
        assert np.array_equal(back.Z, emb.Z)
        np.testing.assert_array_equal(back.eigenvalues, emb.eigenvalues)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.integers(3, 12))
    def test_columns_ordered_and_finite(self, seed, n):
        D = sq_dists(np.random.default_rng(seed).standard_normal((n, 4)))
        emb = classical_mds(D, 4)
        assert np.all(np.isfinite(emb.Z))
        assert np.all(np.diff(emb.eigenvalues) <= 0)


class TestReconstruction:
    def test_sphere_chordal_vs_geodesic(self):
        G = sphere_geodesics()
        chord = reconstruction_curve(transform_chordal(G).D, 39)
        assert chord.mae[2] <= 1e-8
        assert select_dimension(chord, 1e-6) == 3
        raw = reconstruction_curve(G**2, 39)
        assert min(raw.mae) >= 1e-3

    def test_monotone_for_euclidean(self, rng):
        D = sq_dists(rng.standard_normal((15, 6)))
        curve = reconstruction_curve(D, 14)
        assert curve.mae[-1] <= curve.mae[0]
        assert np.all(np.diff(curve.mae) <= 1e-12)

    def test_collinear_selects_one(self):
        D = np.array([[0.0, 1, 4], [1, 0, 1], [4, 1, 0]])
        assert select_dimension(reconstruction_curve(D, 2), 1e-6) == 1

    def test_unreachable_tolerance_warns(self):
        curve = reconstruction_curve(sphere_geodesics(12) ** 2, 4)
        with warnings.catch_warnings(record=True) as w:
            warnings.simplefilter("always")
            assert select_dimension(curve, 1e-12) == 4
        assert any(issubclass(x.category, RuntimeWarning) for x in w)

    def test_bad_pmax(self):
        with pytest.raises(InvalidArgumentError):
            reconstruction_curve(np.zeros((3, 3)), 3)


class TestKMeans:
    def test_separated_blobs(self):
        P = np.array([[0.0, 0], [0.1, 0], [10, 10], [10.1, 10]])
        rep = kmeans_validate(P, sq_dists(P), k=2, seed=0)
        assert rep.intra_median < rep.inter_median
        assert sorted(rep.cluster_sizes()) == [2, 2]

    def test_deterministic(self, rng):
        Z = rng.standard_normal((40, 3))
        a = lloyd_kmeans(Z, 4, seed=7)[0]
        b = lloyd_kmeans(Z, 4, seed=7)[0]
        assert np.array_equal(a, b)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 6))
    def test_no_empty_clusters(self, seed, k):
        rng = np.random.default_rng(seed)
        # heavy duplication invites empty clusters
        Z = np.repeat(rng.standard_normal((3, 2)), 4, axis=0)
        Z = np.vstack([Z, rng.standard_normal((k, 2)) * 5])
        labels = lloyd_kmeans(Z, k, seed=seed)[0]
        assert np.all(np.bincount(labels, minlength=k) > 0)

    def test_partition_of_pairs(self, rng):
        Z = rng.standard_normal((12, 2))
        rep = kmeans_validate(Z, sq_dists(Z), k=3)
        assert len(rep.intra) + len(rep.inter) == 12 * 11 // 2

    def test_k_too_large(self):
        with pytest.raises(InvalidArgumentError):
            kmeans_validate(np.zeros((3, 2)), np.zeros((3, 3)), k=4)
