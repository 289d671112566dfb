"""Multi-view image synthesis from point clouds.

A fixed pinhole camera looks at the cloud's centroid; the cloud itself is
rotated through a schedule of small-angle views. Each view is rasterized by
splatting every point as a filled disk with z-buffering, shaded as
headlight-Lambertian gray, so the images carry local-geometry contrast.
"""

import itertools
from dataclasses import dataclass, field

import numpy as np

from .cloud import Rotation, rotation_from_angles, _freeze
from .errors import EmptyCloudError
from .validation import check_count, check_positive

VIEW_ANGLES = (-np.pi / 16.0, 0.0, np.pi / 16.0)
MAX_VIEWS = len(VIEW_ANGLES) ** 3
MIN_SCENE_RADIUS = 1e-3


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics plus a rigid world-to-camera transform.

    ``pivot`` is subtracted from world points before the extrinsic applies;
    view rotations spin the cloud about this pivot while the camera stays
    put. ``depth_tol`` is the z-buffer tolerance used for visibility.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    pivot: np.ndarray = field(default_factory=lambda: np.zeros(3))
    depth_tol: float = 1e-6

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")
        rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        pivot = np.asarray(self.pivot, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", _freeze(rotation))
        object.__setattr__(self, "translation", _freeze(translation))
        object.__setattr__(self, "pivot", _freeze(pivot))

    def to_camera(self, positions):
        return (positions - self.pivot) @ self.rotation.T + self.translation


@dataclass(frozen=True)
class RenderedView:
    """One rasterized view plus per-point projection bookkeeping."""

    image: np.ndarray    # (H, W, 3) in [0, 1]
    pix: np.ndarray      # (N, 2) float (x, y); NaN for behind-camera points
    depth: np.ndarray    # (N,) camera-space Z
    visible: np.ndarray  # (N,) bool
    rotation_id: int

    def __post_init__(self):
        image = np.asarray(self.image, dtype=np.float64)
        pix = np.asarray(self.pix, dtype=np.float64)
        depth = np.asarray(self.depth, dtype=np.float64)
        visible = np.asarray(self.visible, dtype=bool)
        h, w = image.shape[:2]
        if visible.any():
            vp = pix[visible]
            if not (
                np.isfinite(vp).all()
                and (vp[:, 0] >= -0.5).all()
                and (vp[:, 0] < w - 0.5).all()
                and (vp[:, 1] >= -0.5).all()
                and (vp[:, 1] < h - 0.5).all()
            ):
                raise ValueError("visible points must project inside the image")
            if (depth[visible] <= 0).any():
                raise ValueError("visible points must have positive depth")
        for name, arr in (("image", image), ("pix", pix), ("depth", depth), ("visible", visible)):
            object.__setattr__(self, name, _freeze(arr))


@dataclass(frozen=True)
class ViewSchedule:
    """Deterministic list of small-angle rotations; view 0 is unrotated."""

    angles: tuple       # tuple of (theta_x, theta_y, theta_z)
    rotations: tuple    # matching tuple of Rotation

    def __len__(self):
        return len(self.rotations)


def make_schedule(n_views=MAX_VIEWS):
    """First ``n_views`` of the fixed view list.

    The list enumerates all angle triples over {-pi/16, 0, pi/16}^3 in
    lexicographic order, with the unrotated (0, 0, 0) view moved to the
    front, so a single-view schedule renders the original pose.
    """
    check_count(n_views, "n_views")
    if n_views > MAX_VIEWS:
        raise ValueError(f"n_views must be at most {MAX_VIEWS}, got {n_views}")
    triples = [t for t in itertools.product(VIEW_ANGLES, repeat=3) if any(t)]
    ordered = [(0.0, 0.0, 0.0)] + triples
    chosen = tuple(ordered[:n_views])
    rotations = tuple(rotation_from_angles(*t) for t in chosen)
    return ViewSchedule(angles=chosen, rotations=rotations)


def fit_camera(pc, fov_deg=60.0, margin=1.1, width=224, height=224):
    """Camera on the -z axis framing the cloud.

    The cloud is centered at its centroid (the pivot); the camera sits at
    distance d = margin * r / tan(fov/2) where r is the bounding-sphere
    radius, looking at the pivot. The margin guarantees containment for
    shallow, mostly-planar clouds (the relevant regime for range scans);
    deep clouds may spill a few silhouette points outside the frame.
    """
    check_positive(fov_deg, "fov_deg")
    check_positive(margin, "margin")
    if fov_deg >= 180.0:
        raise ValueError("fov_deg must be below 180")
    centroid = pc.centroid()
    radius = max(pc.bounding_radius(centroid), MIN_SCENE_RADIUS)
    half = np.deg2rad(fov_deg) / 2.0
    distance = margin * radius / np.tan(half)
    focal = (width / 2.0) / np.tan(half)
    return CameraModel(
        fx=focal,
        fy=focal,
        cx=(width - 1) / 2.0,
        cy=(height - 1) / 2.0,
        width=width,
        height=height,
        rotation=np.eye(3),
        translation=np.array([0.0, 0.0, distance]),
        pivot=centroid,
        depth_tol=0.01 * radius,
    )


def project(pc, cam):
    """Pinhole projection. Returns (pix, depth); points with camera-space
    Z <= 0 get NaN pixel coordinates (and keep their nonpositive depth)."""
    coords = cam.to_camera(pc.positions)
    depth = coords[:, 2].copy()
    front = depth > 0.0
    z = np.where(front, depth, 1.0)
    pix = np.empty((len(pc), 2))
    pix[:, 0] = cam.fx * coords[:, 0] / z + cam.cx
    pix[:, 1] = cam.fy * coords[:, 1] / z + cam.cy
    pix[~front] = np.nan
    return pix, depth


def _disk_offsets(splat_px):
    span = np.arange(-splat_px, splat_px + 1)
    dx, dy = np.meshgrid(span, span)
    keep = dx**2 + dy**2 <= splat_px**2
    return dx[keep], dy[keep]


def render_view(pc, cam, rotation=None, splat_px=2, rotation_id=0):
    """Rasterize one view: rotate the cloud about the camera pivot, project,
    and splat each point as a filled disk with nearest-depth-wins z-buffering.

    Shade is headlight Lambertian: |n . view_dir| in camera space, replicated
    to three channels over a white background. A point is visible when the
    z-buffer at its rounded pixel is within ``cam.depth_tol`` of its depth.
    """
    if pc.normals is None:
        raise ValueError("render_view requires normals for shading")
    check_count(splat_px, "splat_px")
    if len(pc) == 0:
        raise EmptyCloudError("cannot render an empty cloud")
    r = np.eye(3) if rotation is None else rotation.matrix

    rotated = (pc.positions - cam.pivot) @ r.T
    coords = rotated @ cam.rotation.T + cam.translation
    normals_cam = (pc.normals @ r.T) @ cam.rotation.T

    depth = coords[:, 2].copy()
    front = depth > 0.0
    z = np.where(front, depth, 1.0)
    pix = np.empty((len(pc), 2))
    pix[:, 0] = cam.fx * coords[:, 0] / z + cam.cx
    pix[:, 1] = cam.fy * coords[:, 1] / z + cam.cy
    pix[~front] = np.nan

    ray = -coords
    ray_norm = np.linalg.norm(ray, axis=1, keepdims=True)
    view_dir = ray / np.where(ray_norm == 0.0, 1.0, ray_norm)
    shade = np.clip(np.abs(np.einsum("ij,ij->i", normals_cam, view_dir)), 0.0, 1.0)

    h, w = cam.height, cam.width
    image = np.ones((h, w, 3))
    zbuf = np.full(h * w, np.inf)

    idx_front = np.nonzero(front)[0]
    if idx_front.size:
        px = np.rint(pix[idx_front, 0]).astype(np.int64)
        py = np.rint(pix[idx_front, 1]).astype(np.int64)
        dx, dy = _disk_offsets(splat_px)
        all_x = px[:, None] + dx[None, :]
        all_y = py[:, None] + dy[None, :]
        point_of = np.broadcast_to(idx_front[:, None], all_x.shape)
        inside = (all_x >= 0) & (all_x < w) & (all_y >= 0) & (all_y < h)
        flat_pix = (all_y * w + all_x)[inside]
        flat_point = point_of[inside]
        flat_depth = depth[flat_point]
        # Nearest depth wins per pixel; exact depth ties go to the lower
        # point index. lexsort orders by pixel, then depth, then index.
        order = np.lexsort((flat_point, flat_depth, flat_pix))
        flat_pix = flat_pix[order]
        first = np.ones(flat_pix.size, dtype=bool)
        first[1:] = flat_pix[1:] != flat_pix[:-1]
        win_pix = flat_pix[first]
        win_point = flat_point[order][first]
        zbuf[win_pix] = depth[win_point]
        image.reshape(-1, 3)[win_pix] = shade[win_point][:, None]

    visible = np.zeros(len(pc), dtype=bool)
    if idx_front.size:
        inbounds = (px >= 0) & (px < w) & (py >= 0) & (py < h)
        own = np.where(inbounds, py * w + px, 0)
        close = depth[idx_front] - zbuf[own] <= cam.depth_tol
        visible[idx_front] = inbounds & close
    return RenderedView(
        image=image, pix=pix, depth=depth, visible=visible, rotation_id=rotation_id
    )
