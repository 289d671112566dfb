"""Memory-bank anomaly detection: store every training feature row, score
test rows by exact nearest-neighbor squared distance.

The bank is immutable after construction and safe to score against from
multiple threads. Persistence uses a small versioned binary format.
"""

import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import BankFormatError
from .validation import check_count

BANK_MAGIC = b"CPMFBANK"
BANK_VERSION = 1

# kd-trees stop paying for themselves well before FPFH dimensionality;
# above this we scan with BLAS.
_KDTREE_MAX_DIM = 16
_BRUTE_CHUNK = 256


@dataclass(frozen=True)
class AnomalyResult:
    """Point-wise anomaly scores for one cloud plus the image-level reduction."""

    point_scores: np.ndarray
    image_score: float
    origin_index: np.ndarray = None  # (N, 2) pixel links, when available

    def __post_init__(self):
        scores = np.asarray(self.point_scores, dtype=np.float64)
        if scores.ndim != 1:
            raise ValueError("point_scores must be 1-D")
        if not np.isfinite(scores).all() or (scores < 0).any():
            raise ValueError("point scores must be finite and non-negative")
        scores.flags.writeable = False
        object.__setattr__(self, "point_scores", scores)
        object.__setattr__(self, "image_score", float(self.image_score))
        if self.origin_index is not None:
            origin = np.asarray(self.origin_index, dtype=np.int32)
            if origin.shape != (scores.shape[0], 2):
                raise ValueError("origin_index must have shape (N, 2)")
            origin.flags.writeable = False
            object.__setattr__(self, "origin_index", origin)


class MemoryBank:
    """M x D reference features with an exact nearest-neighbor index."""

    def __init__(self, features, provenance, coreset_ratio=1.0):
        features = np.ascontiguousarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] == 0:
            raise ValueError("bank features must be a non-empty 2-D array")
        if not np.isfinite(features).all():
            raise ValueError("bank features must be finite")
        provenance = np.ascontiguousarray(provenance, dtype=np.int64)
        if provenance.shape != (features.shape[0], 2):
            raise ValueError("provenance must be (M, 2): (cloud id, point id) per row")
        features.flags.writeable = False
        provenance.flags.writeable = False
        self.features = features
        self.provenance = provenance
        self.coreset_ratio = float(coreset_ratio)
        self._sq_norms = np.einsum("ij,ij->i", features, features)
        self._tree = cKDTree(features) if features.shape[1] <= _KDTREE_MAX_DIM else None

    @property
    def rows(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    def nearest_sq_distances(self, queries):
        """Exact min squared L2 distance from each query row to the bank.

        The winning candidate's distance is recomputed directly, so
        self-queries come back as exactly zero.
        """
        queries = np.ascontiguousarray(queries, dtype=np.float64)
        if self._tree is not None:
            _, idx = self._tree.query(queries, k=1)
            best = np.atleast_1d(idx)
        else:
            best = np.empty(queries.shape[0], dtype=np.int64)
            for start in range(0, queries.shape[0], _BRUTE_CHUNK):
                block = queries[start : start + _BRUTE_CHUNK]
                sq = (
                    np.einsum("ij,ij->i", block, block)[:, None]
                    - 2.0 * (block @ self.features.T)
                    + self._sq_norms[None, :]
                )
                best[start : start + _BRUTE_CHUNK] = np.argmin(sq, axis=1)
        diff = queries - self.features[best]
        return np.einsum("ij,ij->i", diff, diff)


def greedy_coreset(features, n_keep, seed):
    """Greedy farthest-point (k-center) subset of the rows.

    Starts from a seeded row, then repeatedly adds the row farthest from the
    current selection (ties to the lower index). Returns sorted-by-selection
    indices.
    """
    m = features.shape[0]
    check_count(n_keep, "n_keep")
    n_keep = min(n_keep, m)
    rng = np.random.default_rng(seed)
    start = int(rng.integers(m))
    selected = [start]
    min_sq = np.einsum("ij,ij->i", features - features[start], features - features[start])
    while len(selected) < n_keep:
        nxt = int(np.argmax(min_sq))
        selected.append(nxt)
        diff = features - features[nxt]
        np.minimum(min_sq, np.einsum("ij,ij->i", diff, diff), out=min_sq)
    return np.array(selected, dtype=np.int64)


def fit(train_features, coreset_ratio=1.0, seed=0):
    """Build a memory bank from the per-cloud training feature matrices.

    With ``coreset_ratio`` below 1, a greedy k-center subsample keeps
    ceil(ratio * M) rows, deterministically for a given seed.
    """
    if not train_features:
        raise ValueError("training set must contain at least one feature matrix")
    dims = {f.dim for f in train_features}
    if len(dims) != 1:
        raise ValueError(f"training matrices disagree on dimension: {sorted(dims)}")
    if not 0.0 < coreset_ratio <= 1.0:
        raise ValueError(f"coreset_ratio must lie in (0, 1], got {coreset_ratio}")

    stacked = np.concatenate([f.data for f in train_features], axis=0)
    provenance = np.concatenate(
        [
            np.stack([np.full(f.rows, cloud_id), np.arange(f.rows)], axis=1)
            for cloud_id, f in enumerate(train_features)
        ],
        axis=0,
    )
    if coreset_ratio < 1.0:
        n_keep = int(np.ceil(coreset_ratio * stacked.shape[0]))
        keep = greedy_coreset(stacked, n_keep, seed)
        stacked = stacked[keep]
        provenance = provenance[keep]
    return MemoryBank(stacked, provenance, coreset_ratio=coreset_ratio)


def score(bank, f_test, origin_index=None, image_score_mode="max", top_q=0.01):
    """Point scores = exact min squared distance to the bank (Euclidean);
    image score = their max (or the mean of the top ``top_q`` fraction)."""
    if f_test.dim != bank.dim:
        raise ValueError(
            f"feature dimension {f_test.dim} does not match bank dimension {bank.dim}"
        )
    point_scores = bank.nearest_sq_distances(f_test.data)
    if image_score_mode == "max":
        image_score = float(point_scores.max())
    elif image_score_mode == "topq":
        n_top = max(1, int(np.ceil(top_q * point_scores.size)))
        image_score = float(np.sort(point_scores)[-n_top:].mean())
    else:
        raise ValueError(f"unknown image_score_mode {image_score_mode!r}")
    return AnomalyResult(
        point_scores=point_scores, image_score=image_score, origin_index=origin_index
    )


def save_bank(path, bank):
    """Versioned binary layout: magic, version u32, dim u32, row count u64,
    little-endian float32 rows, provenance table (u32 pairs), coreset ratio."""
    with open(path, "wb") as fh:
        fh.write(BANK_MAGIC)
        fh.write(struct.pack("<IIQ", BANK_VERSION, bank.dim, bank.rows))
        fh.write(bank.features.astype("<f4").tobytes())
        fh.write(bank.provenance.astype("<u4").tobytes())
        fh.write(struct.pack("<d", bank.coreset_ratio))


def load_bank(path, expected_dim=None):
    with open(path, "rb") as fh:
        blob = fh.read()
    header = struct.calcsize("<IIQ")
    if len(blob) < len(BANK_MAGIC) + header:
        raise BankFormatError(f"{path}: truncated bank file")
    if blob[: len(BANK_MAGIC)] != BANK_MAGIC:
        raise BankFormatError(f"{path}: bad magic bytes")
    version, dim, rows = struct.unpack_from("<IIQ", blob, len(BANK_MAGIC))
    if version != BANK_VERSION:
        raise BankFormatError(f"{path}: unsupported bank version {version}")
    if expected_dim is not None and dim != expected_dim:
        raise BankFormatError(
            f"{path}: bank dimension {dim} does not match expected {expected_dim}"
        )
    offset = len(BANK_MAGIC) + header
    feat_bytes = rows * dim * 4
    prov_bytes = rows * 2 * 4
    if len(blob) < offset + feat_bytes + prov_bytes + 8:
        raise BankFormatError(f"{path}: truncated bank payload")
    features = (
        np.frombuffer(blob, dtype="<f4", count=rows * dim, offset=offset)
        .reshape(rows, dim)
        .astype(np.float64)
    )
    provenance = (
        np.frombuffer(blob, dtype="<u4", count=rows * 2, offset=offset + feat_bytes)
        .reshape(rows, 2)
        .astype(np.int64)
    )
    (ratio,) = struct.unpack_from("<d", blob, offset + feat_bytes + prov_bytes)
    if not np.isfinite(features).all():
        raise BankFormatError(f"{path}: bank contains non-finite features")
    return MemoryBank(features, provenance, coreset_ratio=ratio)
