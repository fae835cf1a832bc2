"""Classical MDS of squared-distance matrices plus reconstruction and clustering checks."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import pdist

from .divergence import DistanceMatrix, gram_spectrum
from .errors import DegenerateGeometryError, InvalidArgumentError
from .utils import array_digest, read_json, read_matrix_csv, sidecar_path, write_json, write_matrix_csv

# Eigenvalues at or below this fraction of the largest are treated as zero.
POSITIVE_RTOL = 1e-12


def _matrix(D) -> np.ndarray:
    return D.D if isinstance(D, DistanceMatrix) else np.asarray(D, dtype=float)


@dataclass(eq=False)
class Embedding:
    Z: np.ndarray
    eigenvalues: np.ndarray
    dropped_negative_mass: float
    source_hash: str
    p_requested: int
    all_eigenvalues: np.ndarray = field(repr=False, default=None)

    @property
    def p(self) -> int:
        return self.Z.shape[1]

    @property
    def reduced(self) -> bool:
        return self.p < self.p_requested

    def pairwise(self) -> np.ndarray:
        return pdist(self.Z)

    def digest(self) -> str:
        return array_digest(self.Z)

    def metadata(self) -> dict:
        return {
            "p": self.p,
            "p_requested": self.p_requested,
            "eigenvalues": [float(v) for v in self.eigenvalues],
            "dropped_negative_mass": self.dropped_negative_mass,
            "source_hash": self.source_hash,
            "embedding_hash": self.digest(),
        }

    def save(self, path, extra: dict | None = None) -> None:
        write_matrix_csv(path, self.Z)
        meta = self.metadata()
        meta.update(extra or {})
        write_json(sidecar_path(path), meta)

    @classmethod
    def load(cls, path) -> "Embedding":
        Z = read_matrix_csv(path)
        try:
            meta = read_json(sidecar_path(path))
        except FileNotFoundError:
            meta = {}
        lam = np.array(meta.get("eigenvalues", [np.nan] * Z.shape[1]))
        return cls(Z, lam, meta.get("dropped_negative_mass", 0.0), meta.get("source_hash", ""), meta.get("p", Z.shape[1]))


def classical_mds(D, p: int = 15) -> Embedding:
    """Torgerson MDS: Z = V_p Lambda_p^(1/2) over the top-p positive eigenvalues.

    Negative eigenvalues are dropped and their mass reported. Each column is
    sign-fixed so its largest-magnitude entry is positive.
    """
    if p < 1:
        raise InvalidArgumentError("p must be >= 1")
    M = _matrix(D)
    spec = gram_spectrum(M)
    lam, V = spec.eigenvalues, spec.eigenvectors
    if lam[0] <= 0:
        raise DegenerateGeometryError("no positive eigenvalues in the Gram matrix")
    positive = lam > POSITIVE_RTOL * lam[0]
    keep = min(p, int(positive.sum()))
    Z = V[:, :keep] * np.sqrt(lam[:keep])
    for c in range(keep):
        if Z[np.argmax(np.abs(Z[:, c])), c] < 0:
            Z[:, c] = -Z[:, c]
    total = np.sum(np.abs(lam))
    dropped = float(np.sum(np.abs(lam[lam < 0])) / total) if total > 0 else 0.0
    return Embedding(Z, lam[:keep].copy(), dropped, array_digest(M), p, lam)


@dataclass
class ReconstructionCurve:
    dims: list
    mae: list
    reference_median: float

    def rows(self):
        return list(zip(self.dims, self.mae))


def reconstruction_curve(D, p_max: int) -> ReconstructionCurve:
    """Mean absolute error between embedded distances and sqrt(D) for k = 1..p_max."""
    M = _matrix(D)
    N = M.shape[0]
    if not 1 <= p_max <= N - 1:
        raise InvalidArgumentError(f"p_max must be in [1, {N - 1}]")
    target = np.sqrt(np.clip(M[np.triu_indices(N, 1)], 0.0, None))
    full = classical_mds(M, p_max)
    mae = []
    for k in range(1, p_max + 1):
        # pdist orders pairs exactly like triu_indices(N, 1)
        dk = pdist(full.Z[:, : min(k, full.p)])
        mae.append(float(np.mean(np.abs(dk - target))))
    return ReconstructionCurve(list(range(1, p_max + 1)), mae, float(np.median(target)))


def select_dimension(curve: ReconstructionCurve, tolerance: float) -> int:
    """Smallest k whose MAE is within ``tolerance`` times the median true distance."""
    if tolerance <= 0:
        raise InvalidArgumentError("tolerance must be positive")
    limit = tolerance * curve.reference_median
    for k, err in zip(curve.dims, curve.mae):
        if err <= limit:
            return k
    warnings.warn(f"no dimension up to {curve.dims[-1]} reaches tolerance {tolerance}", RuntimeWarning)
    return curve.dims[-1]


@dataclass
class ClusterReport:
    k: int
    assignments: np.ndarray
    intra: np.ndarray
    inter: np.ndarray
    iterations: int
    reseeded: int

    @property
    def intra_median(self) -> float:
        return float(np.median(self.intra)) if len(self.intra) else float("nan")

    @property
    def inter_median(self) -> float:
        return float(np.median(self.inter)) if len(self.inter) else float("nan")

    def cluster_sizes(self) -> list:
        return np.bincount(self.assignments, minlength=self.k).tolist()


def _kmeans_pp(Z, k, rng):
    centers = [Z[rng.integers(len(Z))]]
    for _ in range(1, k):
        d2 = np.min(((Z[:, None, :] - np.array(centers)[None]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        idx = rng.choice(len(Z), p=d2 / total) if total > 0 else rng.integers(len(Z))
        centers.append(Z[idx])
    return np.array(centers)


def lloyd_kmeans(Z: np.ndarray, k: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-9):
    """k-means++ seeding then Lloyd iterations. Empty clusters are reseeded
    from the point farthest from its centroid. Returns (labels, centers, iters, reseeds)."""
    Z = np.asarray(Z, dtype=float)
    if k > len(Z):
        raise InvalidArgumentError(f"k={k} exceeds the number of points {len(Z)}")
    rng = np.random.default_rng(seed)
    C = _kmeans_pp(Z, k, rng)
    reseeds = 0
    it = 0
    for it in range(1, max_iter + 1):
        d2 = ((Z[:, None, :] - C[None]) ** 2).sum(-1)
        labels = np.argmin(d2, axis=1)
        counts = np.bincount(labels, minlength=k)
        while np.any(counts == 0):
            empty = int(np.flatnonzero(counts == 0)[0])
            own = d2[np.arange(len(Z)), labels]
            # only steal from clusters that would stay nonempty
            own = np.where(counts[labels] > 1, own, -np.inf)
            far = int(np.argmax(own))
            labels[far] = empty
            counts = np.bincount(labels, minlength=k)
            reseeds += 1
        newC = np.array([Z[labels == c].mean(axis=0) for c in range(k)])
        shift = float(np.max(np.linalg.norm(newC - C, axis=1)))
        C = newC
        if shift < tol:
            break
    d2 = ((Z[:, None, :] - C[None]) ** 2).sum(-1)
    final = np.argmin(d2, axis=1)
    if len(np.unique(final)) == k:
        labels = final
    return labels, C, it, reseeds


def kmeans_validate(emb, D_original, k: int = 5, seed: int = 0) -> ClusterReport:
    """Cluster the embedding and split sqrt(D_original) pairs into intra/inter samples."""
    if k < 2:
        raise InvalidArgumentError("k must be >= 2")
    Z = emb.Z if isinstance(emb, Embedding) else np.asarray(emb, dtype=float)
    labels, _, iters, reseeds = lloyd_kmeans(Z, k, seed)
    M = _matrix(D_original)
    iu = np.triu_indices(len(Z), 1)
    dist = np.sqrt(np.clip(M[iu], 0.0, None))
    same = labels[iu[0]] == labels[iu[1]]
    return ClusterReport(k, labels, dist[same], dist[~same], iters, reseeds)
