"""Exact spatial search over point positions.

Wraps a kd-tree but pins down the contract the rest of the pipeline relies
on: k-NN results are exact, ordered by nondecreasing distance, and ties are
broken by the lower point index; radius queries return all and only points
within the (closed) ball.
"""

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyCloudError
from .validation import check_count, check_matrix, check_positive


class NeighborIndex:
    """Exact nearest-neighbor index over an (N, D) set of points.

    The tree is built once (single-threaded) and is safe for concurrent
    queries afterwards.
    """

    def __init__(self, points):
        points = check_matrix(np.atleast_2d(points), name="points", allow_empty=True)
        if points.shape[0] == 0:
            raise EmptyCloudError("cannot build an index over zero points")
        self._points = points
        self._tree = cKDTree(points)

    @classmethod
    def from_cloud(cls, pc):
        return cls(pc.positions)

    def __len__(self):
        return self._points.shape[0]

    @property
    def points(self):
        return self._points

    def knn(self, query, k):
        """Indices of the min(k, N) nearest points, ties broken by lower index.

        Returns (indices, distances), both sorted by (distance, index).
        """
        check_count(k, "k")
        query = np.asarray(query, dtype=np.float64).reshape(-1)
        n = len(self)
        k_eff = min(k, n)
        dist, _ = self._tree.query(query, k=k_eff)
        dist = np.atleast_1d(dist)
        # Re-rank the closed ball of the k-th distance so exact ties resolve
        # to the lower point index.
        kth = float(dist[-1])
        ball = kth * (1.0 + 1e-12) + 5e-324
        while True:
            candidates = np.asarray(
                self._tree.query_ball_point(query, ball, return_sorted=True),
                dtype=np.int64,
            )
            if candidates.size >= k_eff:
                break
            ball = max(ball * 2.0, 1e-300)
        cand_dist = np.linalg.norm(self._points[candidates] - query, axis=1)
        order = np.lexsort((candidates, cand_dist))
        chosen = order[:k_eff]
        return candidates[chosen], cand_dist[chosen]

    def knn_batch(self, queries, k):
        """Vectorized k-NN for many queries; no tie canonicalization.

        Ties (exactly equal distances) resolve in tree order, which is
        deterministic for a fixed input but not guaranteed to be the lower
        index. Use :meth:`knn` where that matters.
        """
        check_count(k, "k")
        queries = np.asarray(queries, dtype=np.float64)
        k_eff = min(k, len(self))
        dist, idx = self._tree.query(queries, k=k_eff)
        if k_eff == 1:
            dist = dist[:, None]
            idx = idx[:, None]
        return idx, dist

    def radius(self, query, radius):
        """All points with distance <= radius, sorted by (distance, index)."""
        check_positive(radius, "radius")
        query = np.asarray(query, dtype=np.float64).reshape(-1)
        found = np.asarray(
            self._tree.query_ball_point(query, radius, return_sorted=True),
            dtype=np.int64,
        )
        if found.size == 0:
            return found, np.empty(0)
        dist = np.linalg.norm(self._points[found] - query, axis=1)
        order = np.lexsort((found, dist))
        return found[order], dist[order]

    def radius_batch(self, queries, radius):
        """Neighbor index lists (closed ball) per query row, each sorted by index."""
        check_positive(radius, "radius")
        queries = np.asarray(queries, dtype=np.float64)
        lists = self._tree.query_ball_point(queries, radius, return_sorted=True)
        return [np.asarray(lst, dtype=np.int64) for lst in lists]


def knn(index, query, k):
    """Functional form of :meth:`NeighborIndex.knn`; returns indices only."""
    indices, _ = index.knn(query, k)
    return indices
