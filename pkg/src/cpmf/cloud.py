"""Core point-cloud containers and geometric primitives.

All containers are frozen after construction (arrays are marked read-only)
so they can be shared across threads without copying.
"""

from dataclasses import dataclass

import numpy as np

from .errors import EmptyCloudError
from .validation import check_positions, check_positive

ORTHONORMAL_TOL = 1e-9
UNIT_NORMAL_TOL = 1e-6


def _freeze(arr):
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class OrganizedCloud:
    """A structured range scan: an H x W grid of 3D points plus a validity mask.

    ``valid[i, j]`` is False where the scan recorded no return (encoded in the
    source files as z <= 0 or non-finite channels).
    """

    points: np.ndarray  # (H, W, 3) float64
    valid: np.ndarray   # (H, W) bool

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if points.ndim != 3 or points.shape[2] != 3:
            raise ValueError(f"points must have shape (H, W, 3), got {points.shape}")
        if points.shape[0] < 1 or points.shape[1] < 1:
            raise ValueError("grid must be at least 1x1")
        if valid.shape != points.shape[:2]:
            raise ValueError(
                f"valid mask shape {valid.shape} does not match grid {points.shape[:2]}"
            )
        if valid.any() and not np.isfinite(points[valid]).all():
            raise ValueError("points must be finite wherever valid is true")
        object.__setattr__(self, "points", _freeze(points))
        object.__setattr__(self, "valid", _freeze(valid))

    @property
    def height(self):
        return self.points.shape[0]

    @property
    def width(self):
        return self.points.shape[1]

    @property
    def num_valid(self):
        return int(self.valid.sum())


@dataclass(frozen=True)
class PointCloud:
    """An unordered cloud: N x 3 positions with optional unit normals.

    ``origin_index`` optionally links each point back to the (row, col) pixel
    of the organized scan it came from; entries are unique when present.
    """

    positions: np.ndarray          # (N, 3) float64
    normals: np.ndarray = None     # (N, 3) float64 unit rows, optional
    origin_index: np.ndarray = None  # (N, 2) int32 (row, col), optional

    def __post_init__(self):
        positions = check_positions(self.positions)
        if positions.shape[0] == 0:
            raise EmptyCloudError("point cloud must contain at least one point")
        object.__setattr__(self, "positions", _freeze(positions))

        if self.normals is not None:
            normals = check_positions(self.normals, name="normals")
            if normals.shape != positions.shape:
                raise ValueError("normals must match positions shape")
            norms = np.linalg.norm(normals, axis=1)
            if np.abs(norms - 1.0).max() > UNIT_NORMAL_TOL:
                raise ValueError("normals must have unit length")
            object.__setattr__(self, "normals", _freeze(normals))

        if self.origin_index is not None:
            origin = np.asarray(self.origin_index, dtype=np.int32)
            if origin.shape != (positions.shape[0], 2):
                raise ValueError("origin_index must have shape (N, 2)")
            if (origin < 0).any():
                raise ValueError("origin_index entries must be non-negative")
            flat = origin[:, 0].astype(np.int64) * (origin[:, 1].max() + 1) + origin[:, 1]
            if np.unique(flat).size != origin.shape[0]:
                raise ValueError("origin_index entries must be unique")
            object.__setattr__(self, "origin_index", _freeze(origin))

    def __len__(self):
        return self.positions.shape[0]

    def with_normals(self, normals):
        return PointCloud(self.positions, normals=normals, origin_index=self.origin_index)

    def select(self, mask_or_indices):
        """Subset of points, keeping normals and origin links aligned."""
        positions = self.positions[mask_or_indices]
        normals = None if self.normals is None else self.normals[mask_or_indices]
        origin = None if self.origin_index is None else self.origin_index[mask_or_indices]
        if positions.shape[0] == 0:
            raise EmptyCloudError("selection removed every point")
        return PointCloud(positions, normals=normals, origin_index=origin)

    def centroid(self):
        return self.positions.mean(axis=0)

    def bounding_radius(self, center=None):
        """Radius of the bounding sphere around ``center`` (default: centroid)."""
        if center is None:
            center = self.centroid()
        return float(np.linalg.norm(self.positions - center, axis=1).max())


@dataclass(frozen=True)
class Rotation:
    """A proper rotation: 3x3 orthonormal matrix with determinant +1."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"rotation matrix must be 3x3, got {m.shape}")
        residual = np.abs(m @ m.T - np.eye(3)).max()
        if residual > ORTHONORMAL_TOL:
            raise ValueError(f"matrix is not orthonormal (residual {residual:.3g})")
        det = np.linalg.det(m)
        if abs(det - 1.0) > ORTHONORMAL_TOL:
            raise ValueError(f"matrix determinant must be +1, got {det!r}")
        object.__setattr__(self, "matrix", _freeze(m))

    def compose(self, other):
        """Rotation equal to applying ``other`` first, then ``self``."""
        return Rotation(self.matrix @ other.matrix)

    @staticmethod
    def identity():
        return Rotation(np.eye(3))


def rotation_from_angles(theta_x, theta_y, theta_z):
    """Rotation R = Rx(theta_x) @ Ry(theta_y) @ Rz(theta_z).

    Each factor is the standard right-handed rotation about its axis.
    """
    angles = np.array([theta_x, theta_y, theta_z], dtype=np.float64)
    if not np.isfinite(angles).all():
        raise ValueError(f"angles must be finite, got {angles.tolist()}")
    cx, sx = np.cos(angles[0]), np.sin(angles[0])
    cy, sy = np.cos(angles[1]), np.sin(angles[1])
    cz, sz = np.cos(angles[2]), np.sin(angles[2])
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return Rotation(rx @ ry @ rz)


def rotate(pc, rotation):
    """Rotate positions (and normals, if present) by the same matrix."""
    r = rotation.matrix
    positions = pc.positions @ r.T
    normals = None if pc.normals is None else pc.normals @ r.T
    return PointCloud(positions, normals=normals, origin_index=pc.origin_index)


def to_point_cloud(oc):
    """Flatten the valid pixels of an organized scan, in row-major order."""
    if not oc.valid.any():
        raise EmptyCloudError("organized cloud has no valid pixels")
    rows, cols = np.nonzero(oc.valid)
    positions = oc.points[rows, cols]
    origin = np.stack([rows, cols], axis=1).astype(np.int32)
    return PointCloud(positions, origin_index=origin)


def voxel_downsample(pc, voxel_size):
    """Collapse points into voxel centroids on a grid anchored at the min corner.

    Returns the downsampled cloud and ``up_map``, which assigns every input
    point the index of its voxel's representative. Output voxels appear in
    order of first occurrence, so inputs sparser than the grid come back in
    their original order.
    """
    check_positive(voxel_size, "voxel_size")
    positions = pc.positions
    anchor = positions.min(axis=0)
    keys = np.floor((positions - anchor) / voxel_size).astype(np.int64)

    # Deterministic voxel ids ordered by first occurrence in scan order.
    _, first_pos, inverse = np.unique(
        keys, axis=0, return_index=True, return_inverse=True
    )
    inverse = inverse.ravel()
    order = np.argsort(first_pos, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    up_map = rank[inverse]

    n_voxels = order.size
    sums = np.zeros((n_voxels, 3))
    counts = np.zeros(n_voxels)
    np.add.at(sums, up_map, positions)
    np.add.at(counts, up_map, 1.0)
    centroids = sums / counts[:, None]
    return PointCloud(centroids), up_map
