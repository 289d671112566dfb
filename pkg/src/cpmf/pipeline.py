"""End-to-end pipeline wrapped in scikit-learn style estimators.

``CpmfFeatureExtractor`` turns scans into per-point fused feature matrices;
``CpmfDetector`` adds the memory bank: fit on normal scans, predict anomaly
scores for test scans. Inputs may be organized clouds, plain point clouds,
or paths to scan files.
"""

from concurrent.futures import ThreadPoolExecutor
from os import PathLike

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from . import detect
from .backbones import make_backend
from .cloud import OrganizedCloud, PointCloud, to_point_cloud, voxel_downsample
from .config import PipelineConfig
from .features2d import extract_2d_modality
from .features3d import estimate_normals, fpfh, propagate_to_full
from .fusion import fuse
from .io import load_organized_tiff
from .preprocess import boundary_strip, ransac_plane, remove_background
from .render import fit_camera, make_schedule

_CONFIG_FIELDS = tuple(PipelineConfig.__dataclass_fields__)


def load_scan(source):
    """Accept an OrganizedCloud, a PointCloud, or a path to a scan file."""
    if isinstance(source, (OrganizedCloud, PointCloud)):
        return source
    if isinstance(source, (str, PathLike)):
        return load_organized_tiff(source)
    raise TypeError(f"cannot interpret {type(source).__name__} as a scan")


def extract_foreground(scan, config):
    """Organized scans get the background-plane removal; point clouds are
    taken as foreground directly."""
    scan = load_scan(scan)
    if isinstance(scan, PointCloud):
        return scan
    if not config.preprocess:
        return to_point_cloud(scan)
    strip = boundary_strip(scan, strip_width=config.strip_width)
    plane = ransac_plane(
        strip,
        threshold=config.ransac_threshold,
        iterations=config.ransac_iterations,
        seed=config.seed,
    )
    return remove_background(
        scan,
        plane,
        db_eps=config.db_eps,
        db_min_pts=config.db_min_pts,
        keep_all_clusters=config.keep_all_clusters,
    )


def extract_fused_features(foreground, config, backend=None):
    """Full per-point features for one foreground cloud.

    Returns (features, cloud-with-normals). Descriptors run on the voxel
    downsampled cloud and are propagated back to every point; normals ride
    along the same mapping for rendering.
    """
    if config.feature_mode != "3d" and backend is None:
        backend = make_backend(config.backbone, dim=config.backbone_dim)

    extent = foreground.positions.max(axis=0) - foreground.positions.min(axis=0)
    diagonal = float(np.linalg.norm(extent))
    voxel = config.voxel_size if config.voxel_size is not None else max(0.005 * diagonal, 1e-9)
    ds, up_map = voxel_downsample(foreground, voxel)

    k = min(config.normals_k, len(ds))
    ds = estimate_normals(ds, k=k)
    full = foreground.with_normals(ds.normals[up_map])

    f3d = None
    if config.feature_mode in ("3d", "cpmf"):
        radius = config.fpfh_radius if config.fpfh_radius is not None else 2.5 * voxel
        f3d = propagate_to_full(fpfh(ds, radius), up_map)

    f2d = None
    if config.feature_mode in ("2d", "cpmf"):
        cam = fit_camera(
            full,
            fov_deg=config.fov_deg,
            margin=config.margin,
            width=config.image_size,
            height=config.image_size,
        )
        schedule = make_schedule(config.n_views)
        f2d = extract_2d_modality(
            full,
            schedule,
            cam,
            backend,
            splat_px=config.splat_px,
            mask_occluded=config.mask_occluded,
            lookup=config.lookup,
        )
    return fuse(f2d, f3d, mode=config.feature_mode), full


def _map_jobs(fn, items, jobs):
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


class CpmfFeatureExtractor(TransformerMixin, BaseEstimator):
    """Stateless transformer: scans in, fused per-point feature matrices out.

    Parameters mirror :class:`~cpmf.config.PipelineConfig`; validation
    happens at transform time.
    """

    def __init__(
        self,
        n_views=27,
        backbone="stub",
        backbone_dim=448,
        image_size=224,
        splat_px=2,
        fov_deg=60.0,
        margin=1.1,
        lookup="nearest",
        mask_occluded=False,
        voxel_size=None,
        fpfh_radius=None,
        normals_k=30,
        feature_mode="cpmf",
        preprocess=True,
        strip_width=10,
        ransac_threshold=0.005,
        ransac_iterations=500,
        db_eps=None,
        db_min_pts=10,
        keep_all_clusters=False,
        seed=0,
        jobs=1,
    ):
        self.n_views = n_views
        self.backbone = backbone
        self.backbone_dim = backbone_dim
        self.image_size = image_size
        self.splat_px = splat_px
        self.fov_deg = fov_deg
        self.margin = margin
        self.lookup = lookup
        self.mask_occluded = mask_occluded
        self.voxel_size = voxel_size
        self.fpfh_radius = fpfh_radius
        self.normals_k = normals_k
        self.feature_mode = feature_mode
        self.preprocess = preprocess
        self.strip_width = strip_width
        self.ransac_threshold = ransac_threshold
        self.ransac_iterations = ransac_iterations
        self.db_eps = db_eps
        self.db_min_pts = db_min_pts
        self.keep_all_clusters = keep_all_clusters
        self.seed = seed
        self.jobs = jobs

    def _config(self):
        params = {k: v for k, v in self.get_params().items() if k in _CONFIG_FIELDS}
        return PipelineConfig.from_mapping(params)

    def fit(self, X=None, y=None):
        self._config()  # validate parameters
        return self

    def transform(self, X):
        """X: iterable of scans. Returns a list of FeatureMatrix."""
        config = self._config()
        backend = None
        if config.feature_mode != "3d":
            backend = make_backend(config.backbone, dim=config.backbone_dim)

        def run(scan):
            fg = extract_foreground(scan, config)
            features, _ = extract_fused_features(fg, config, backend=backend)
            return features

        return _map_jobs(run, list(X), config.jobs)


class CpmfDetector(BaseEstimator):
    """Memory-bank anomaly detector over fused point-cloud features.

    ``fit`` ingests normal scans and stores their features; ``predict``
    returns per-scan anomaly results (point scores plus an image score);
    ``score_samples`` returns just the image scores.
    """

    def __init__(
        self,
        n_views=27,
        backbone="stub",
        backbone_dim=448,
        image_size=224,
        splat_px=2,
        fov_deg=60.0,
        margin=1.1,
        lookup="nearest",
        mask_occluded=False,
        voxel_size=None,
        fpfh_radius=None,
        normals_k=30,
        feature_mode="cpmf",
        coreset_ratio=1.0,
        image_score_mode="max",
        top_q=0.01,
        preprocess=True,
        strip_width=10,
        ransac_threshold=0.005,
        ransac_iterations=500,
        db_eps=None,
        db_min_pts=10,
        keep_all_clusters=False,
        seed=0,
        jobs=1,
    ):
        self.n_views = n_views
        self.backbone = backbone
        self.backbone_dim = backbone_dim
        self.image_size = image_size
        self.splat_px = splat_px
        self.fov_deg = fov_deg
        self.margin = margin
        self.lookup = lookup
        self.mask_occluded = mask_occluded
        self.voxel_size = voxel_size
        self.fpfh_radius = fpfh_radius
        self.normals_k = normals_k
        self.feature_mode = feature_mode
        self.coreset_ratio = coreset_ratio
        self.image_score_mode = image_score_mode
        self.top_q = top_q
        self.preprocess = preprocess
        self.strip_width = strip_width
        self.ransac_threshold = ransac_threshold
        self.ransac_iterations = ransac_iterations
        self.db_eps = db_eps
        self.db_min_pts = db_min_pts
        self.keep_all_clusters = keep_all_clusters
        self.seed = seed
        self.jobs = jobs

    @classmethod
    def from_config(cls, config):
        return cls(**config.to_dict())

    def _config(self):
        return PipelineConfig.from_mapping(self.get_params())

    def _backend(self, config):
        if config.feature_mode == "3d":
            return None
        return make_backend(config.backbone, dim=config.backbone_dim)

    def _featurize_all(self, X, config, backend):
        def run(scan):
            fg = extract_foreground(scan, config)
            return extract_fused_features(fg, config, backend=backend)

        return _map_jobs(run, list(X), config.jobs)

    def fit(self, X, y=None):
        """Build the memory bank from normal scans."""
        config = self._config()
        backend = self._backend(config)
        featurized = self._featurize_all(X, config, backend)
        if not featurized:
            raise ValueError("fit requires at least one training scan")
        self.bank_ = detect.fit(
            [features for features, _ in featurized],
            coreset_ratio=config.coreset_ratio,
            seed=config.seed,
        )
        self.train_point_counts_ = [features.rows for features, _ in featurized]
        return self

    def _check_fitted(self):
        if not hasattr(self, "bank_"):
            raise NotFittedError("this CpmfDetector is not fitted; call fit first")

    def predict(self, X):
        """Anomaly results (one per scan), in input order."""
        self._check_fitted()
        config = self._config()
        backend = self._backend(config)

        def run(scan):
            fg = extract_foreground(scan, config)
            features, full = extract_fused_features(fg, config, backend=backend)
            return detect.score(
                self.bank_,
                features,
                origin_index=full.origin_index,
                image_score_mode=config.image_score_mode,
                top_q=config.top_q,
            )

        return _map_jobs(run, list(X), config.jobs)

    def score_samples(self, X):
        """Image-level anomaly scores; larger means more anomalous."""
        return np.array([r.image_score for r in self.predict(X)])
