"""Hierarchical semantic structure over instance features.

Low level: instance clustering on RGB features (density-based by default,
seeded k-means for deterministic tests). High level: cluster centers built
from fused features, cosine similarity between centers, top-k neighbor sets
per cluster, a curriculum schedule that widens the neighbor search range
over training, and Bernoulli sampling of neighbors with the similarity as
success probability.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from sklearn.cluster import DBSCAN, KMeans

from .memory import FeatureBank

OUTLIER = -1


@dataclass(frozen=True)
class ClusteringConfig:
    method: str = "dbscan"
    eps: float = 0.5
    min_samples: int = 4
    n_clusters: int = 0  # required > 0 for k-means
    seed: int = 0

    def validate(self) -> None:
        if self.method not in ("dbscan", "kmeans"):
            raise ValueError(f"unknown clustering method {self.method!r}")
        if self.method == "dbscan" and self.eps <= 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")
        if self.method == "dbscan" and self.min_samples < 1:
            raise ValueError(f"min_samples must be >= 1, got {self.min_samples}")
        if self.method == "kmeans" and self.n_clusters < 1:
            raise ValueError(f"n_clusters must be >= 1 for k-means, got {self.n_clusters}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ClusteringConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown clustering config key(s): {sorted(unknown)}")
        return cls(**d)


@dataclass
class ClusterState:
    """Per-epoch pseudo-label structure; centers/neighbor sets filled in later."""

    labels: np.ndarray  # length N, cluster index or OUTLIER
    clusters: list[np.ndarray]  # m disjoint, sorted sample_id arrays
    centers: Optional[np.ndarray] = None  # m x D fused centers
    neighbor_sets: Optional[list[list[tuple[int, float]]]] = None
    epoch: int = 0

    @property
    def m(self) -> int:
        return len(self.clusters)

    @property
    def n_outliers(self) -> int:
        return int((self.labels == OUTLIER).sum())


@dataclass
class NeighborDraw:
    source_cluster: int
    drawn: list[tuple[int, float]] = field(default_factory=list)  # (cluster index, weight)


def cluster_instances(features: np.ndarray, config: ClusteringConfig | None = None) -> ClusterState:
    """Cluster instance features into pseudo-label groups.

    Density-based clustering may mark outliers (label OUTLIER); k-means labels
    every sample. Raises ValueError when fewer than 2 samples end up labeled.
    """
    config = config or ClusteringConfig()
    config.validate()
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        raise ValueError(f"features must be N x D, got shape {feats.shape}")
    if not np.isfinite(feats).all():
        raise ValueError("features contain non-finite values")

    if config.method == "dbscan":
        labels = DBSCAN(eps=config.eps, min_samples=config.min_samples).fit_predict(feats)
    else:
        n_clusters = min(config.n_clusters, feats.shape[0])
        km = KMeans(n_clusters=n_clusters, random_state=config.seed, n_init=10)
        labels = km.fit_predict(feats)
    labels = labels.astype(np.int64)

    n_labeled = int((labels != OUTLIER).sum())
    if n_labeled < 2:
        raise ValueError(f"clustering left {n_labeled} non-outlier samples; need at least 2")

    m = int(labels.max()) + 1
    clusters = [np.flatnonzero(labels == l) for l in range(m)]
    if any(len(c) == 0 for c in clusters):
        raise ValueError("clustering produced an empty cluster index")
    return ClusterState(labels=labels, clusters=clusters)


def cluster_feature_means(clusters: list[np.ndarray], matrix: np.ndarray) -> np.ndarray:
    """Row means of ``matrix`` over each cluster's sample ids."""
    if any(len(c) == 0 for c in clusters):
        raise ValueError("cannot average an empty cluster")
    return np.stack([matrix[np.sort(np.asarray(c))].mean(axis=0) for c in clusters])


def compute_fused_centers(state: ClusterState, fused_bank: FeatureBank) -> np.ndarray:
    """m x D cluster centers: mean of fused-bank rows over each cluster."""
    entries = fused_bank.entries.detach().cpu().numpy()
    return cluster_feature_means(state.clusters, entries)


def cluster_similarity(u_a: np.ndarray, u_b: np.ndarray) -> float:
    """Cosine similarity of two cluster centers."""
    a = np.asarray(u_a, dtype=np.float64).ravel()
    b = np.asarray(u_b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cluster_similarity of a zero-norm center is undefined")
    return float(a @ b / (na * nb))


def build_neighbor_sets(centers: np.ndarray, k: int) -> list[list[tuple[int, float]]]:
    """Top-k most similar other clusters per cluster, similarity descending.

    Ties are broken by smaller cluster index. k=0 yields empty lists.
    """
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    centers = np.asarray(centers, dtype=np.float64)
    m = centers.shape[0]
    norms = np.linalg.norm(centers, axis=1)
    if (norms == 0).any():
        raise ValueError("zero-norm cluster center")
    unit = centers / norms[:, None]
    sims = unit @ unit.T

    neighbor_sets: list[list[tuple[int, float]]] = []
    for l in range(m):
        others = [(j, float(sims[l, j])) for j in range(m) if j != l]
        others.sort(key=lambda js: (-js[1], js[0]))
        neighbor_sets.append(others[: min(k, m - 1)])
    return neighbor_sets


def curriculum_k(t: int, T: int, K: int) -> int:
    """Neighbor search range for epoch t of T, growing to K by the last epoch.

    The literal schedule t * floor(K / T) collapses to 0 whenever K < T, so
    the range is computed as max(1, round(t * K / T)); the two coincide
    whenever K is a multiple of T.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    if not 1 <= t <= T:
        raise ValueError(f"t must lie in [1, {T}], got {t}")
    return max(1, round(t * K / T))


def sample_neighbors(state: ClusterState, source: int, rng: np.random.Generator) -> NeighborDraw:
    """Bernoulli trial per neighbor with the clamped similarity as success probability.

    Included neighbors carry weight w = clamp(sim, 0, 1); failed trials are
    excluded. Negative-similarity neighbors can never be drawn.
    """
    if state.neighbor_sets is None:
        raise ValueError("neighbor_sets have not been built for this ClusterState")
    if not 0 <= source < state.m:
        raise IndexError(f"source cluster {source} out of range [0, {state.m})")
    drawn = []
    for j, sim in state.neighbor_sets[source]:
        p = min(max(sim, 0.0), 1.0)
        if rng.random() < p:
            drawn.append((j, p))
    return NeighborDraw(source_cluster=source, drawn=drawn)
