"""Evaluation: image-level ROC area and the per-region overlap (PRO) curve
area up to a false-positive-rate cap, plus mapping point scores back onto
the organized grid for mask-based comparison."""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .errors import UndefinedMetricError

# Anomaly regions are connected components of the mask under 8-connectivity.
_CONNECTIVITY = np.ones((3, 3), dtype=int)


@dataclass(frozen=True)
class GroundTruth:
    """Per-element anomaly labels plus the connected anomaly regions.

    ``regions`` is a tuple of index arrays that partitions exactly the
    anomalous elements. Elements may be cloud points (via origin_index) or
    grid pixels, as long as scores are indexed the same way.
    """

    labels: np.ndarray            # (N,) int {0, 1}
    regions: tuple                # tuple of int index arrays

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int8)
        if labels.ndim != 1 or not np.isin(labels, (0, 1)).all():
            raise ValueError("labels must be a flat 0/1 array")
        regions = tuple(np.asarray(r, dtype=np.int64) for r in self.regions)
        covered = np.concatenate(regions) if regions else np.empty(0, dtype=np.int64)
        anomalous = np.nonzero(labels == 1)[0]
        if not np.array_equal(np.sort(covered), anomalous):
            raise ValueError("regions must partition exactly the anomalous elements")
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "regions", regions)

    @property
    def image_label(self):
        return int(self.labels.any())

    @classmethod
    def from_mask(cls, mask, origin_index=None):
        """Build ground truth from a pixel mask.

        With ``origin_index`` the elements are the points it maps; otherwise
        they are the grid pixels in row-major order. Regions that lose every
        point to preprocessing are dropped.
        """
        mask = np.asarray(mask, dtype=bool)
        region_map, n_regions = ndimage.label(mask, structure=_CONNECTIVITY)
        if origin_index is None:
            flat_regions = region_map.ravel()
            labels = mask.ravel().astype(np.int8)
        else:
            origin = np.asarray(origin_index, dtype=np.int64)
            flat_regions = region_map[origin[:, 0], origin[:, 1]]
            labels = mask[origin[:, 0], origin[:, 1]].astype(np.int8)
        regions = tuple(
            idx
            for r in range(1, n_regions + 1)
            for idx in [np.nonzero(flat_regions == r)[0]]
            if idx.size
        )
        return cls(labels=labels, regions=regions)


def auroc(scores, labels):
    """Area under the ROC curve, computed as the Mann-Whitney statistic
    (ties counted half)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-D and equally long")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both classes present")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _pro_curve(per_cloud_scores, gts):
    """(fpr, mean-overlap) points swept over every distinct pooled score,
    descending, with the predicted set = {score >= threshold}."""
    all_scores = [np.asarray(s, dtype=np.float64) for s in per_cloud_scores]
    if len(all_scores) != len(gts):
        raise ValueError("need one ground truth per score vector")
    for s, gt in zip(all_scores, gts):
        if s.shape != gt.labels.shape:
            raise ValueError("scores and ground-truth labels must align")

    pooled = np.concatenate(all_scores)
    pooled_labels = np.concatenate([gt.labels for gt in gts])
    n_normal = int((pooled_labels == 0).sum())
    regions = [
        (cloud_idx, region)
        for cloud_idx, gt in enumerate(gts)
        for region in gt.regions
    ]
    if not regions:
        raise UndefinedMetricError("PRO needs at least one anomalous region")
    if n_normal == 0:
        raise UndefinedMetricError("PRO needs at least one normal element")

    thresholds = np.unique(pooled)[::-1]
    normal_scores = np.sort(pooled[pooled_labels == 0])
    # Count of normal elements with score >= t, via searchsorted on the
    # ascending sorted normal scores.
    n_fp = n_normal - np.searchsorted(normal_scores, thresholds, side="left")
    fpr = n_fp / n_normal

    # Accumulate the per-region overlap mean without materializing a
    # (regions x thresholds) matrix; region counts can both get large.
    mean_pro = np.zeros(thresholds.size)
    for cloud_idx, region in regions:
        region_scores = np.sort(all_scores[cloud_idx][region])
        hits = region.size - np.searchsorted(region_scores, thresholds, side="left")
        mean_pro += hits / region.size
    mean_pro /= len(regions)

    fpr = np.concatenate([[0.0], fpr])
    mean_pro = np.concatenate([[0.0], mean_pro])
    return fpr, mean_pro


def p_pro(per_cloud_scores, gts, fpr_max=0.3):
    """Area under the (FPR, mean per-region overlap) curve for FPR in
    [0, fpr_max], normalized by fpr_max, trapezoidal over all distinct
    score thresholds."""
    if not 0.0 < fpr_max <= 1.0:
        raise ValueError(f"fpr_max must lie in (0, 1], got {fpr_max}")
    fpr, mean_pro = _pro_curve(per_cloud_scores, gts)

    cut = np.searchsorted(fpr, fpr_max, side="left")
    if cut == fpr.size:
        fpr_clip, pro_clip = fpr, mean_pro
    else:
        if fpr[cut] == fpr_max:
            fpr_clip = fpr[: cut + 1]
            pro_clip = mean_pro[: cut + 1]
        else:
            # Interpolate the curve at exactly fpr_max.
            frac = (fpr_max - fpr[cut - 1]) / (fpr[cut] - fpr[cut - 1])
            boundary = mean_pro[cut - 1] + frac * (mean_pro[cut] - mean_pro[cut - 1])
            fpr_clip = np.concatenate([fpr[:cut], [fpr_max]])
            pro_clip = np.concatenate([mean_pro[:cut], [boundary]])
    return float(np.trapezoid(pro_clip, fpr_clip) / fpr_max)


def scores_to_grid(result, oc):
    """Scatter point scores onto the organized grid via origin pixels;
    pixels with no surviving point (background or invalid) get zero."""
    if result.origin_index is None:
        raise ValueError("result carries no origin pixels")
    grid = np.zeros((oc.height, oc.width))
    origin = result.origin_index
    grid[origin[:, 0], origin[:, 1]] = result.point_scores
    return grid
