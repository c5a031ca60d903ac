"""
Slide clustering for rehearsal-buffer selection.

Slides are grouped either by Lloyd's k-means on their mean patch embedding,
or by k-medoids on the symmetric Chamfer distance between patch sets. Both
use k-means++ seeding and are deterministic for a given generator.
"""

import logging
from collections.abc import Sequence
from typing import Union

import numpy as np

from .errors import ContractViolation

logger = logging.getLogger(__name__)

SLIDE_DISTANCES = ("mean", "chamfer")
MAX_ITERATIONS = 50
TOLERANCE = 1e-6

Seed = Union[int, np.random.Generator]


def _generator(seed: Seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _seed_indices(sq_dist: np.ndarray, k: int, rng: np.random.Generator) -> list[int]:
    """k-means++ seeding on a precomputed squared-distance matrix."""
    n = len(sq_dist)
    chosen = [int(rng.integers(0, n))]
    for _ in range(1, k):
        nearest = sq_dist[:, chosen].min(axis=1)
        total = nearest.sum()
        if total <= 0.0:
            # every remaining point coincides with a seed
            chosen.append(next(i for i in range(n) if i not in chosen))
            continue
        chosen.append(int(rng.choice(n, p=nearest / total)))
    return chosen


def _pairwise_sq(points: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - points[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def kmeans(
    points: np.ndarray,
    k: int,
    seed: Seed = 0,
    max_iter: int = MAX_ITERATIONS,
    tol: float = TOLERANCE,
) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's iterations from k-means++ seeds; returns (labels, centroids).

    An emptied cluster keeps its previous centroid.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or len(points) == 0:
        raise ContractViolation(f"kmeans needs a non-empty 2-D point array, got {points.shape}")
    if k < 1:
        raise ContractViolation("kmeans needs k >= 1")
    k = min(k, len(points))
    rng = _generator(seed)
    centroids = points[_seed_indices(_pairwise_sq(points), k, rng)].copy()
    labels = np.zeros(len(points), dtype=np.int64)
    for iteration in range(max_iter):
        diff = points[:, None, :] - centroids[None, :, :]
        labels = np.argmin(np.einsum("ijk,ijk->ij", diff, diff), axis=1)
        updated = centroids.copy()
        for j in range(k):
            members = labels == j
            if np.any(members):
                updated[j] = points[members].mean(axis=0)
        shift = float(np.linalg.norm(updated - centroids))
        centroids = updated
        if shift < tol:
            logger.debug("kmeans converged after %d iterations", iteration + 1)
            break
    return labels, centroids


def chamfer_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric mean nearest-neighbour Euclidean distance between two sets."""
    diff = a[:, None, :] - b[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    return float(dist.min(axis=1).mean() + dist.min(axis=0).mean())


def kmedoids(
    distances: np.ndarray, k: int, seed: Seed = 0, max_iter: int = MAX_ITERATIONS
) -> tuple[np.ndarray, list[int]]:
    """Alternating k-medoids on a distance matrix; returns (labels, medoid indices)."""
    n = len(distances)
    if n == 0 or distances.shape != (n, n):
        raise ContractViolation(f"kmedoids needs a square distance matrix, got {distances.shape}")
    if k < 1:
        raise ContractViolation("kmedoids needs k >= 1")
    k = min(k, n)
    rng = _generator(seed)
    medoids = _seed_indices(distances**2, k, rng)
    labels = np.argmin(distances[:, medoids], axis=1)
    for _ in range(max_iter):
        updated = []
        for j in range(k):
            members = np.flatnonzero(labels == j)
            if len(members) == 0:
                updated.append(medoids[j])
                continue
            cost = distances[np.ix_(members, members)].sum(axis=1)
            updated.append(int(members[np.argmin(cost)]))
        if updated == medoids:
            break
        medoids = updated
        labels = np.argmin(distances[:, medoids], axis=1)
    return labels, medoids


def cluster_slides(
    bags: Sequence[np.ndarray],
    n_clusters: int,
    seed: Seed = 0,
    slide_distance: str = "mean",
) -> np.ndarray:
    """Cluster assignment for the bags of one class.

    The effective number of clusters is min(n_clusters, len(bags)).
    """
    if n_clusters < 1:
        raise ContractViolation("n_clusters must be >= 1")
    if slide_distance not in SLIDE_DISTANCES:
        raise ContractViolation(
            f"slide_distance must be one of {SLIDE_DISTANCES}, got {slide_distance}"
        )
    if len(bags) == 0:
        return np.zeros(0, dtype=np.int64)
    k = min(n_clusters, len(bags))
    if k == 1:
        return np.zeros(len(bags), dtype=np.int64)
    if slide_distance == "mean":
        means = np.stack([np.asarray(bag).mean(axis=0) for bag in bags])
        labels, _ = kmeans(means, k, seed)
        return labels
    n = len(bags)
    distances = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            distances[i, j] = distances[j, i] = chamfer_distance(bags[i], bags[j])
    labels, _ = kmedoids(distances, k, seed)
    return labels
