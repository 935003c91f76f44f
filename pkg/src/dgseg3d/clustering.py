"""Density clustering and k-means.

DBSCAN is used to split the points of one semantic class into instance
groups; k-means++ seeding plus Lloyd iteration initializes the per-class
prototype sets.  Both are deterministic given their inputs (and the rng
for k-means), which the tests rely on.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteInput, TooFewSamples, ValidationError


@dataclass(frozen=True)
class DbscanParams:
    """eps: neighborhood radius in meters; min_pts: neighbor count
    (including the point itself) required for a core point."""

    eps: float = 0.2
    min_pts: int = 100

    def __post_init__(self):
        if not self.eps > 0:
            raise ValidationError(f"eps must be > 0, got {self.eps}")
        if self.min_pts < 1:
            raise ValidationError(f"min_pts must be >= 1, got {self.min_pts}")


class _VoxelGrid:
    """Uniform hash of points into cubic cells of side eps.

    Any point within eps of a query point lies in one of the 27 cells
    around the query's cell, so gathering those cells and checking true
    distances is exact.
    """

    def __init__(self, points: np.ndarray, eps: float):
        self.points = points
        self.eps = eps
        self.cells: dict[tuple[int, int, int], list[int]] = {}
        keys = np.floor(points / eps).astype(np.int64)
        for i, key in enumerate(map(tuple, keys)):
            self.cells.setdefault(key, []).append(i)
        self._keys = keys

    def neighbors(self, i: int) -> np.ndarray:
        """Indices within eps of point i (inclusive), i itself included."""
        cx, cy, cz = self._keys[i]
        candidates: list[int] = []
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    bucket = self.cells.get((cx + dx, cy + dy, cz + dz))
                    if bucket:
                        candidates.extend(bucket)
        cand = np.asarray(candidates, dtype=np.int64)
        diff = self.points[cand] - self.points[i]
        mask = np.einsum("ij,ij->i", diff, diff) <= self.eps * self.eps
        return cand[mask]


def dbscan(points: np.ndarray, params: DbscanParams) -> np.ndarray:
    """Cluster points by density; returns per-point cluster ids.

    Core points have >= min_pts neighbors within eps (counting
    themselves).  Clusters are maximal density-connected sets with
    contiguous ids 0..M-1 assigned in scan order; noise points get -1.
    Border points join the first cluster whose expansion reaches them.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValidationError(f"points must be (N, 3), got {points.shape}")
    if not np.all(np.isfinite(points)):
        raise NonFiniteInput("dbscan input contains non-finite coordinates")

    grid = _VoxelGrid(points, params.eps)
    visited = np.zeros(n, dtype=bool)
    cluster = 0
    for start in range(n):
        if visited[start]:
            continue
        visited[start] = True
        neigh = grid.neighbors(start)
        if neigh.size < params.min_pts:
            continue  # provisional noise; a later expansion may claim it
        labels[start] = cluster
        queue = deque(neigh.tolist())
        while queue:
            j = queue.popleft()
            if not visited[j]:
                visited[j] = True
                jneigh = grid.neighbors(j)
                if jneigh.size >= params.min_pts:
                    queue.extend(jneigh.tolist())
            if labels[j] == -1:
                labels[j] = cluster
        cluster += 1
    return labels


def _nearest(features: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d2 = ((features[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)


def inertia(features: np.ndarray, centroids: np.ndarray, assignment: np.ndarray) -> float:
    """Sum of squared distances of each row to its assigned centroid."""
    diff = features - centroids[assignment]
    return float(np.einsum("ij,ij->", diff, diff))


def kmeanspp_seed(features: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Pick k distinct rows by the k-means++ squared-distance rule."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        raise ValidationError(f"features must be 2-D, got shape {feats.shape}")
    m = feats.shape[0]
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if m < k:
        raise TooFewSamples(f"need at least {k} rows, got {m}")
    if not np.all(np.isfinite(feats)):
        raise NonFiniteInput("k-means++ input contains non-finite values")

    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = rng.integers(m)
    d2 = ((feats - feats[chosen[0]]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(m, p=d2 / total))
        else:
            # all remaining rows coincide with a chosen one; pick uniformly
            remaining = np.setdiff1d(np.arange(m), chosen[:i])
            idx = int(rng.choice(remaining))
        chosen[i] = idx
        d2 = np.minimum(d2, ((feats - feats[idx]) ** 2).sum(axis=1))
    return feats[chosen].copy()


def kmeans(
    features: np.ndarray,
    k: int,
    max_iter: int = 100,
    rng: np.random.Generator | None = None,
    history: list[float] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd iteration from a k-means++ seed.

    Stops at an assignment fixpoint or after max_iter updates.  Empty
    clusters are re-seeded to the point currently farthest from its own
    centroid.  If ``history`` is a list, the inertia after each update is
    appended to it.
    """
    feats = np.asarray(features, dtype=np.float64)
    if max_iter < 1:
        raise ValidationError(f"max_iter must be >= 1, got {max_iter}")
    rng = np.random.default_rng() if rng is None else rng
    centroids = kmeanspp_seed(feats, k, rng)
    assign = _nearest(feats, centroids)
    if history is not None:
        history.append(inertia(feats, centroids, assign))

    for _ in range(max_iter):
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, feats)
        new_centroids = np.where(
            (counts > 0)[:, None], sums / np.maximum(counts, 1)[:, None], centroids
        )
        empties = np.nonzero(counts == 0)[0]
        if empties.size:
            dist = np.linalg.norm(feats - new_centroids[assign], axis=1)
            for j in empties:
                far = int(np.argmax(dist))
                new_centroids[j] = feats[far]
                dist[far] = -1.0
        new_assign = _nearest(feats, new_centroids)
        centroids = new_centroids
        if history is not None:
            history.append(inertia(feats, centroids, new_assign))
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    return centroids, assign
