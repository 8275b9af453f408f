"""Point-cloud container, spatial indexing, sampling and mask arithmetic."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree


class DegenerateCloudError(ValueError):
    """Raised when a cloud has zero spatial extent."""


@dataclass(frozen=True)
class PointCloud:
    """Positions plus unit normals for N points.

    Immutable after construction; arrays are stored read-only so a cloud can
    be shared freely between sessions and worker threads.
    """

    positions: np.ndarray  # (N, 3) float64
    normals: np.ndarray    # (N, 3) float64, unit length

    def __post_init__(self):
        pos = np.ascontiguousarray(self.positions, dtype=np.float64)
        nrm = np.ascontiguousarray(self.normals, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3 or pos.shape[0] < 1:
            raise ValueError(f"positions must be (N, 3) with N >= 1, got {pos.shape}")
        if nrm.shape != pos.shape:
            raise ValueError("normals must match positions shape")
        lengths = np.linalg.norm(nrm, axis=1)
        if np.any(np.abs(lengths - 1.0) > 1e-4):
            raise ValueError("normals must be unit length (within 1e-4)")
        pos.setflags(write=False)
        nrm.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "normals", nrm)

    @property
    def n(self) -> int:
        return self.positions.shape[0]


def normalize_cloud(cloud: PointCloud) -> PointCloud:
    """Center the cloud at the origin and scale the farthest point to norm 1.

    Normals are renormalized to unit length but otherwise untouched.
    Raises DegenerateCloudError when all points coincide.
    """
    centered = cloud.positions - cloud.positions.mean(axis=0)
    scale = np.linalg.norm(centered, axis=1).max()
    if scale < 1e-12:
        raise DegenerateCloudError("zero extent")
    normals = cloud.normals / np.linalg.norm(cloud.normals, axis=1, keepdims=True)
    return PointCloud(centered / scale, normals)


@dataclass(frozen=True)
class NeighborIndex:
    """kd-tree over a cloud's positions with deterministic tie-breaking.

    Queries match an exhaustive distance sort: ascending distance, ties broken
    by ascending point index, the query point itself excluded.
    """

    positions: np.ndarray
    _tree: cKDTree = field(repr=False)

    @classmethod
    def build(cls, cloud: PointCloud) -> "NeighborIndex":
        return cls(cloud.positions, cKDTree(cloud.positions))

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    def knn_query(self, i: int, k: int) -> np.ndarray:
        """Indices of the min(k, N-1) nearest neighbors of point i."""
        if not 0 <= i < self.n:
            raise IndexError(f"point index {i} out of range [0, {self.n})")
        if k < 1:
            raise ValueError("k must be >= 1")
        return self._query_rows(np.array([i]), k)[0]

    def knn_all(self, k: int) -> np.ndarray:
        """(N, min(k, N-1)) neighbor table for every point at once."""
        return self._query_rows(np.arange(self.n), k)

    def _query_rows(self, rows: np.ndarray, k: int) -> np.ndarray:
        k_eff = min(k, self.n - 1)
        if k_eff == 0:
            return np.empty((len(rows), 0), dtype=np.intp)
        # Over-query so that distance ties crossing the k-th slot can still be
        # resolved by index before truncation.
        k_q = min(self.n, k_eff + 9)
        dist, idx = self._tree.query(self.positions[rows], k=k_q)
        dist = np.atleast_2d(dist)
        idx = np.atleast_2d(idx)
        out = np.empty((len(rows), k_eff), dtype=np.intp)
        for r, i in enumerate(rows):
            keep = idx[r] != i
            d, j = dist[r][keep], idx[r][keep]
            order = np.lexsort((j, d))
            out[r] = j[order][:k_eff]
        return out


def fps_sample(cloud: PointCloud, n: int, seed: int) -> tuple[PointCloud, np.ndarray]:
    """Farthest-point sample n points; returns the subset and its index map.

    The first point is a seeded uniform draw; each next point maximizes its
    minimum distance to the already-chosen set (ties to the lowest index).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if n >= cloud.n:
        idx = np.arange(cloud.n)
        return cloud, idx
    chosen = fps_indices(cloud.positions, n, seed)
    return PointCloud(cloud.positions[chosen], cloud.normals[chosen]), chosen


def fps_indices(positions: np.ndarray, n: int, seed: int) -> np.ndarray:
    """Index form of farthest-point sampling over raw positions."""
    rng = np.random.default_rng(seed)
    total = positions.shape[0]
    if n >= total:
        return np.arange(total)
    chosen = np.empty(n, dtype=np.intp)
    chosen[0] = rng.integers(total)
    min_d2 = np.sum((positions - positions[chosen[0]]) ** 2, axis=1)
    for t in range(1, n):
        nxt = int(np.argmax(min_d2))  # argmax takes the lowest index on ties
        chosen[t] = nxt
        d2 = np.sum((positions - positions[nxt]) ** 2, axis=1)
        np.minimum(min_d2, d2, out=min_d2)
    return chosen


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection-over-union of two boolean masks; 1.0 when both are empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask length mismatch: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union
