"""Background-plane removal for organized scans.

The recipe: points from a strip around the image boundary seed a RANSAC
plane fit; everything near that plane is dropped; density clustering on the
remainder keeps the object and discards stray points.
"""

from dataclasses import dataclass

import numpy as np
from sklearn.cluster import DBSCAN

from .cloud import PointCloud, to_point_cloud
from .errors import (
    DegenerateGeometryError,
    EmptyCloudError,
    EmptyForegroundError,
    InsufficientPointsError,
)
from .neighbors import NeighborIndex
from .validation import check_count, check_positive

UNIT_TOL = 1e-9
_CROSS_EPS = 1e-12


@dataclass(frozen=True)
class PlaneModel:
    """Plane {p : normal . p + offset = 0} with an inlier band half-width."""

    normal: np.ndarray
    offset: float
    inlier_threshold: float

    def __post_init__(self):
        normal = np.asarray(self.normal, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(normal)
        if abs(norm - 1.0) > UNIT_TOL:
            raise ValueError(f"plane normal must be unit length, got norm {norm!r}")
        normal.flags.writeable = False
        object.__setattr__(self, "normal", normal)
        object.__setattr__(self, "offset", float(self.offset))
        object.__setattr__(self, "inlier_threshold", float(self.inlier_threshold))

    def distances(self, positions):
        return np.abs(positions @ self.normal + self.offset)


def boundary_strip(oc, strip_width=10):
    """Valid points whose pixel lies within ``strip_width`` of any grid edge.

    A strip wider than half the grid simply covers the whole valid grid.
    """
    check_count(strip_width, "strip_width")
    h, w = oc.height, oc.width
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    in_strip = (
        (rows < strip_width)
        | (rows >= h - strip_width)
        | (cols < strip_width)
        | (cols >= w - strip_width)
    )
    mask = oc.valid & in_strip
    if not mask.any():
        raise EmptyCloudError("boundary strip contains no valid points")
    r, c = np.nonzero(mask)
    return PointCloud(oc.points[r, c], origin_index=np.stack([r, c], axis=1))


def _fit_plane_lsq(positions):
    """Least-squares plane through points: smallest-eigenvector of the covariance."""
    centroid = positions.mean(axis=0)
    centered = positions - centroid
    cov = centered.T @ centered
    eigvals, eigvecs = np.linalg.eigh(cov)
    normal = eigvecs[:, 0]
    if eigvals[1] <= _CROSS_EPS * max(eigvals[2], 1.0):
        raise DegenerateGeometryError("plane points are (nearly) collinear")
    normal = normal / np.linalg.norm(normal)
    return normal, float(-normal @ centroid)


def ransac_plane(pc, threshold=0.005, iterations=500, seed=0):
    """RANSAC plane fit: best 3-point hypothesis by inlier count, then a
    least-squares refit on its inliers.

    Deterministic given (inputs, seed); ties in inlier count go to the
    earlier trial.
    """
    check_positive(threshold, "threshold")
    check_count(iterations, "iterations")
    positions = pc.positions
    n = positions.shape[0]
    if n < 3:
        raise InsufficientPointsError(f"plane fit needs at least 3 points, got {n}")

    rng = np.random.default_rng(seed)
    best_count = -1
    best_inliers = None
    for _ in range(iterations):
        i, j, k = rng.choice(n, size=3, replace=False)
        normal = np.cross(positions[j] - positions[i], positions[k] - positions[i])
        norm = np.linalg.norm(normal)
        if norm < _CROSS_EPS:
            continue
        normal = normal / norm
        offset = -normal @ positions[i]
        inliers = np.abs(positions @ normal + offset) <= threshold
        count = int(inliers.sum())
        if count > best_count:
            best_count = count
            best_inliers = inliers
    if best_inliers is None:
        raise DegenerateGeometryError("all sampled point triples were collinear")

    normal, offset = _fit_plane_lsq(positions[best_inliers])
    return PlaneModel(normal=normal, offset=offset, inlier_threshold=threshold)


def median_neighbor_spacing(pc):
    """Median nearest-neighbor distance; scale reference for clustering."""
    index = NeighborIndex.from_cloud(pc)
    k = min(2, len(pc))
    if k < 2:
        return 0.0
    _, dist = index.knn_batch(pc.positions, k=2)
    return float(np.median(dist[:, 1]))


def remove_background(oc, plane, db_eps=None, db_min_pts=10, keep_all_clusters=False):
    """Drop plane inliers, then keep the dominant density cluster.

    ``db_eps`` defaults to 3x the median nearest-neighbor spacing of the
    off-plane points. With ``keep_all_clusters`` every non-noise cluster
    survives; by default only the largest does (ties go to the lower
    cluster label). Origin indices are preserved for survivors.
    """
    check_count(db_min_pts, "db_min_pts")
    pc = to_point_cloud(oc)
    off_plane = plane.distances(pc.positions) > plane.inlier_threshold
    if not off_plane.any():
        raise EmptyForegroundError("every point lies on the background plane")
    remainder = pc.select(off_plane)

    if db_eps is None:
        spacing = median_neighbor_spacing(remainder)
        db_eps = 3.0 * spacing if spacing > 0 else plane.inlier_threshold
    check_positive(db_eps, "db_eps")

    labels = DBSCAN(eps=db_eps, min_samples=db_min_pts).fit_predict(remainder.positions)
    clustered = labels >= 0
    if not clustered.any():
        raise EmptyForegroundError("density clustering marked every point as noise")
    if keep_all_clusters:
        keep = clustered
    else:
        counts = np.bincount(labels[clustered])
        keep = labels == int(np.argmax(counts))
    return remainder.select(keep)
