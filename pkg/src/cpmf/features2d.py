"""Per-point features from rendered views: feature-map extraction, lookup at
projected pixels, and multi-view aggregation."""

from dataclasses import dataclass

import numpy as np

from .backbones import bilinear_resize
from .errors import CpmfError
from .features3d import MODALITY_2D, FeatureMatrix
from .render import render_view
from .validation import check_image


class ViewError(CpmfError):
    """A per-view step failed; carries the offending view index."""

    def __init__(self, view_index, cause):
        super().__init__(f"view {view_index}: {cause}")
        self.view_index = view_index


@dataclass(frozen=True)
class ViewFeatures:
    """Per-point features looked up in one view, plus that view's visibility."""

    features: FeatureMatrix
    visible: np.ndarray
    rotation_id: int

    def __post_init__(self):
        visible = np.asarray(self.visible, dtype=bool)
        if visible.shape != (self.features.rows,):
            raise ValueError("visibility flags must have one entry per point")
        object.__setattr__(self, "visible", visible)


def extract_feature_map(backend, image):
    """Normalize, run the backend, and concatenate its blocks into one
    (H, W, dim) map, bilinearly upsampling every block to image resolution."""
    image = check_image(image)
    h, w = image.shape[:2]
    if backend.expected_size is not None and (h, w) != tuple(backend.expected_size):
        raise ValueError(
            f"backend expects {backend.expected_size} images, got {(h, w)}"
        )
    mean = np.asarray(backend.channel_mean, dtype=np.float64)
    std = np.asarray(backend.channel_std, dtype=np.float64)
    normalized = (image - mean) / std
    blocks = backend.infer(normalized)
    upsampled = [
        block if block.shape[:2] == (h, w) else bilinear_resize(block, h, w)
        for block in blocks
    ]
    feature_map = np.concatenate(upsampled, axis=2)
    if feature_map.shape[2] != backend.dim:
        raise ValueError(
            f"backend declared dim {backend.dim} but produced {feature_map.shape[2]}"
        )
    return feature_map


def _bilinear_sample(feature_map, x, y):
    h, w = feature_map.shape[:2]
    x = np.clip(x, 0.0, w - 1.0)
    y = np.clip(y, 0.0, h - 1.0)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    top = feature_map[y0, x0] * (1 - fx) + feature_map[y0, x1] * fx
    bottom = feature_map[y1, x0] * (1 - fx) + feature_map[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def align_to_points(feature_map, view, lookup="nearest"):
    """Per-point feature = the map at each point's projected pixel
    (row = y, col = x), clamped to bounds. Points that project nowhere
    (behind the camera) get the zero vector and are flagged not visible."""
    feature_map = np.asarray(feature_map, dtype=np.float64)
    h, w = feature_map.shape[:2]
    if (h, w) != view.image.shape[:2]:
        raise ValueError(
            f"feature map {(h, w)} does not match view image {view.image.shape[:2]}"
        )
    if lookup not in ("nearest", "bilinear"):
        raise ValueError(f"lookup must be 'nearest' or 'bilinear', got {lookup!r}")

    pix = view.pix
    ok = np.isfinite(pix).all(axis=1)
    features = np.zeros((pix.shape[0], feature_map.shape[2]))
    if ok.any():
        x = pix[ok, 0]
        y = pix[ok, 1]
        if lookup == "nearest":
            xi = np.clip(np.rint(x).astype(np.int64), 0, w - 1)
            yi = np.clip(np.rint(y).astype(np.int64), 0, h - 1)
            features[ok] = feature_map[yi, xi]
        else:
            features[ok] = _bilinear_sample(feature_map, x, y)
    visible = view.visible & ok
    return ViewFeatures(
        features=FeatureMatrix(features, modality=MODALITY_2D),
        visible=visible,
        rotation_id=view.rotation_id,
    )


def aggregate_views(views, mask_occluded=False):
    """Mean of per-view features, summed in ascending rotation order.

    With ``mask_occluded`` the mean runs over views where the point is
    visible, falling back to the all-view mean for points visible nowhere.
    """
    if not views:
        raise ValueError("aggregate_views needs at least one view")
    ordered = sorted(views, key=lambda v: v.rotation_id)
    rows, dim = ordered[0].features.rows, ordered[0].features.dim
    for v in ordered:
        if (v.features.rows, v.features.dim) != (rows, dim):
            raise ValueError("all views must share the same N and D")

    total = np.zeros((rows, dim))
    for v in ordered:
        total = total + v.features.data
    mean_all = total / len(ordered)
    if not mask_occluded:
        return FeatureMatrix(mean_all, modality=MODALITY_2D)

    weighted = np.zeros((rows, dim))
    counts = np.zeros(rows)
    for v in ordered:
        weighted = weighted + v.features.data * v.visible[:, None]
        counts = counts + v.visible
    seen = counts > 0
    out = mean_all.copy()
    out[seen] = weighted[seen] / counts[seen, None]
    return FeatureMatrix(out, modality=MODALITY_2D)


def extract_2d_modality(
    pc, schedule, cam, backend, splat_px=2, mask_occluded=False, lookup="nearest"
):
    """Render every scheduled view, featurize it, look features up at each
    point's pixel, and aggregate across views into one N x D matrix."""
    views = []
    for k, rotation in enumerate(schedule.rotations):
        try:
            rendered = render_view(pc, cam, rotation, splat_px=splat_px, rotation_id=k)
            feature_map = extract_feature_map(backend, rendered.image)
            views.append(align_to_points(feature_map, rendered, lookup=lookup))
        except ViewError:
            raise
        except Exception as exc:
            raise ViewError(k, exc) from exc
    return aggregate_views(views, mask_occluded=mask_occluded)
