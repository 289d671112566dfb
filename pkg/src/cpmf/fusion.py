"""Row-normalize and concatenate the two modality feature blocks, so both
contribute with equal magnitude to the distance-based scoring."""

import numpy as np

from .features3d import MODALITY_CPMF, FeatureMatrix

ZERO_NORM_EPS = 1e-12

FEATURE_MODES = ("2d", "3d", "cpmf")


def normalize_rows(features):
    """Divide each row by its Euclidean norm.

    Rows with norm below 1e-12 are left as zeros; their count is returned as
    a diagnostic so callers can surface degenerate points.
    """
    data = features.data
    norms = np.linalg.norm(data, axis=1)
    zero = norms < ZERO_NORM_EPS
    safe = np.where(zero, 1.0, norms)
    out = data / safe[:, None]
    out[zero] = 0.0
    return FeatureMatrix(out, modality=features.modality), int(zero.sum())


def fuse(f2d, f3d, mode="cpmf"):
    """Unit-normalize each modality and concatenate: [f2d | f3d].

    ``mode`` selects the feature combination: "cpmf" concatenates both,
    "2d"/"3d" return the single normalized block (for ablations). The
    unused argument may be None in single-modality modes.
    """
    if mode not in FEATURE_MODES:
        raise ValueError(f"mode must be one of {FEATURE_MODES}, got {mode!r}")
    if mode == "2d":
        normalized, _ = normalize_rows(f2d)
        return FeatureMatrix(normalized.data, modality=MODALITY_CPMF)
    if mode == "3d":
        normalized, _ = normalize_rows(f3d)
        return FeatureMatrix(normalized.data, modality=MODALITY_CPMF)
    if f2d.rows != f3d.rows:
        raise ValueError(
            f"modalities disagree on point count: {f2d.rows} vs {f3d.rows}"
        )
    n2d, _ = normalize_rows(f2d)
    n3d, _ = normalize_rows(f3d)
    return FeatureMatrix(
        np.concatenate([n2d.data, n3d.data], axis=1), modality=MODALITY_CPMF
    )
