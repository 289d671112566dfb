"""Local geometric descriptors: normal estimation and fast point feature
histograms (FPFH), plus propagation of downsampled features back to full
resolution.

The descriptor for a point is built from the Darboux-frame angles between
point pairs: with source normal u, v = d x u / |d x u| and w = u x v, the
features are alpha = v . n_t, phi = u . d / |d| and theta =
atan2(w . n_t, u . n_t). Each feature is histogrammed into 11 bins
(alpha in bins 0-10, phi in 11-21, theta in 22-32), every sub-histogram
normalized to sum 100, and the final descriptor adds an inverse-distance
weighted average of the neighbors' histograms.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .neighbors import NeighborIndex
from .validation import check_positive, check_vector3

logger = logging.getLogger(__name__)

FPFH_BINS = 11
FPFH_DIM = 3 * FPFH_BINS

MODALITY_3D = "3d"
MODALITY_2D = "2d"
MODALITY_CPMF = "cpmf"
_MODALITIES = (MODALITY_3D, MODALITY_2D, MODALITY_CPMF)

_DEGENERATE_EPS = 1e-12


@dataclass(frozen=True)
class FeatureMatrix:
    """N x D block of per-point features with a modality tag."""

    data: np.ndarray
    modality: str

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise ValueError(f"feature data must be 2-D, got {data.ndim}-D")
        if not np.isfinite(data).all():
            raise ValueError("feature data contains non-finite values")
        if self.modality not in _MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def rows(self):
        return self.data.shape[0]

    @property
    def dim(self):
        return self.data.shape[1]


def estimate_normals(pc, k=30, viewpoint=(0.0, 0.0, 0.0), chunk=65536):
    """Per-point normals from the covariance of the k nearest neighbors.

    Each normal is the smallest-eigenvector of its neighborhood covariance,
    sign-flipped so it points toward ``viewpoint``. Neighborhoods whose
    covariance has rank < 2 get the viewpoint direction instead.
    """
    n = len(pc)
    if not 3 <= k <= n:
        raise ValueError(f"k must satisfy 3 <= k <= N, got k={k}, N={n}")
    viewpoint = check_vector3(viewpoint, name="viewpoint")

    positions = pc.positions
    index = NeighborIndex(positions)
    normals = np.empty_like(positions)
    degenerate = np.zeros(n, dtype=bool)
    for start in range(0, n, chunk):
        block = positions[start : start + chunk]
        idx, _ = index.knn_batch(block, k=k)
        nbhd = positions[idx]                       # (B, k, 3)
        centered = nbhd - nbhd.mean(axis=1, keepdims=True)
        cov = np.einsum("bki,bkj->bij", centered, centered)
        eigvals, eigvecs = np.linalg.eigh(cov)
        normals[start : start + chunk] = eigvecs[:, :, 0]
        scale = np.maximum(eigvals[:, 2], 1e-30)
        degenerate[start : start + chunk] = eigvals[:, 1] <= _DEGENERATE_EPS * scale

    toward = viewpoint - positions
    if degenerate.any():
        logger.warning("normal estimation: %d degenerate neighborhoods", degenerate.sum())
        fallback = toward[degenerate]
        norms = np.linalg.norm(fallback, axis=1, keepdims=True)
        fallback = np.where(norms > 0, fallback / np.where(norms == 0, 1.0, norms), [0.0, 0.0, 1.0])
        normals[degenerate] = fallback

    flip = np.einsum("ij,ij->i", normals, toward) < 0.0
    normals[flip] *= -1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return pc.with_normals(normals)


def _pair_features(p_src, n_src, p_tgt, n_tgt):
    """Darboux-frame angles per pair; invalid pairs (zero distance or
    displacement parallel to the source normal) are masked out."""
    d = p_tgt - p_src
    dist = np.linalg.norm(d, axis=1)
    ok = dist > 0.0
    safe = np.where(ok, dist, 1.0)
    du = d / safe[:, None]

    a1 = np.einsum("ij,ij->i", n_src, du)
    a2 = np.einsum("ij,ij->i", n_tgt, du)
    # The point whose normal makes the smaller angle with the connecting
    # line acts as source.
    swap = np.abs(a1) < np.abs(a2)
    ns = np.where(swap[:, None], n_tgt, n_src)
    nt = np.where(swap[:, None], n_src, n_tgt)
    du = np.where(swap[:, None], -du, du)
    phi = np.where(swap, -a2, a1)

    v = np.cross(du, ns)
    vnorm = np.linalg.norm(v, axis=1)
    ok &= vnorm > 0.0
    v /= np.where(vnorm == 0.0, 1.0, vnorm)[:, None]
    w = np.cross(ns, v)

    alpha = np.einsum("ij,ij->i", v, nt)
    theta = np.arctan2(np.einsum("ij,ij->i", w, nt), np.einsum("ij,ij->i", ns, nt))
    return alpha, phi, theta, dist, ok


def _bin_unit(values):
    return np.clip(np.floor(FPFH_BINS * (values + 1.0) / 2.0), 0, FPFH_BINS - 1).astype(np.int64)


def _bin_angle(values):
    return np.clip(
        np.floor(FPFH_BINS * (values + np.pi) / (2.0 * np.pi)), 0, FPFH_BINS - 1
    ).astype(np.int64)


def spfh(pc, radius):
    """Per-point simplified histograms (the single-point stage of FPFH).

    Returns (histograms, pairs) where pairs carries the flat valid
    (source, target, distance) arrays reused by the weighting stage. Each
    11-bin sub-histogram of a point with neighbors sums to exactly 100.
    """
    if pc.normals is None:
        raise ValueError("spfh requires normals; run estimate_normals first")
    check_positive(radius, "radius")
    positions = pc.positions
    normals = pc.normals
    n = positions.shape[0]

    index = NeighborIndex(positions)
    lists = index.radius_batch(positions, radius)
    src = np.concatenate([np.full(len(lst), i) for i, lst in enumerate(lists)])
    tgt = np.concatenate(lists)
    keep = src != tgt
    src, tgt = src[keep], tgt[keep]

    alpha, phi, theta, dist, ok = _pair_features(
        positions[src], normals[src], positions[tgt], normals[tgt]
    )
    src, tgt, dist = src[ok], tgt[ok], dist[ok]
    alpha, phi, theta = alpha[ok], phi[ok], theta[ok]

    counts = np.bincount(src, minlength=n).astype(np.float64)
    incr = 100.0 / counts[src]

    hist = np.zeros((n, FPFH_DIM))
    np.add.at(hist, (src, _bin_unit(alpha)), incr)
    np.add.at(hist, (src, FPFH_BINS + _bin_unit(phi)), incr)
    np.add.at(hist, (src, 2 * FPFH_BINS + _bin_angle(theta)), incr)
    return hist, (src, tgt, dist, counts)


def fpfh(pc, radius):
    """33-dimensional FPFH descriptor per point, over radius neighborhoods.

    Descriptor = own SPFH plus the inverse-distance weighted mean of the
    neighbors' SPFHs. Points with no neighbors inside the radius get a zero
    descriptor.
    """
    hist, (src, tgt, dist, counts) = spfh(pc, radius)
    n = hist.shape[0]
    isolated = counts == 0
    if isolated.any():
        logger.warning("fpfh: %d points have no neighbors within radius", isolated.sum())

    # Weighted neighbor contribution: (1/k) sum over neighbors of SPFH / distance.
    weights = 1.0 / (counts[src] * dist)
    neighbor_term = sparse.csr_matrix((weights, (src, tgt)), shape=(n, n)) @ hist
    out = hist + neighbor_term
    out[isolated] = 0.0
    return FeatureMatrix(out, modality=MODALITY_3D)


def propagate_to_full(ds_features, up_map):
    """Expand downsampled features to full resolution: row i of the output is
    ``ds_features[up_map[i]]``."""
    up_map = np.asarray(up_map, dtype=np.int64)
    if up_map.ndim != 1:
        raise ValueError("up_map must be a flat index list")
    if up_map.size and (up_map.min() < 0 or up_map.max() >= ds_features.rows):
        raise IndexError(
            f"up_map references row {up_map.max()} of a {ds_features.rows}-row matrix"
        )
    return FeatureMatrix(ds_features.data[up_map], modality=ds_features.modality)
