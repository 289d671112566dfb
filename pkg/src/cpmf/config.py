"""Pipeline configuration: one flat key-value mapping with full defaulting,
strict validation, and YAML round-tripping. Unknown keys are hard errors."""

from dataclasses import asdict, dataclass, fields

import yaml

from .fusion import FEATURE_MODES
from .render import MAX_VIEWS


@dataclass(frozen=True)
class PipelineConfig:
    """Every knob of the fit/score workflow.

    ``None`` means "derive from the data": voxel_size becomes 0.5% of the
    foreground bounding-box diagonal, fpfh_radius 2.5x the voxel size, and
    db_eps 3x the median neighbor spacing.
    """

    # 2D modality
    n_views: int = 27
    backbone: str = "stub"          # "stub" or path to an ONNX model file
    backbone_dim: int = 448
    image_size: int = 224
    splat_px: int = 2
    fov_deg: float = 60.0
    margin: float = 1.1
    lookup: str = "nearest"         # or "bilinear"
    mask_occluded: bool = False
    # 3D modality
    voxel_size: float = None
    fpfh_radius: float = None
    normals_k: int = 30
    # fusion / detection
    feature_mode: str = "cpmf"      # "2d", "3d", or "cpmf"
    coreset_ratio: float = 1.0
    image_score_mode: str = "max"   # or "topq"
    top_q: float = 0.01
    # preprocessing
    preprocess: bool = True
    strip_width: int = 10
    ransac_threshold: float = 0.005
    ransac_iterations: int = 500
    db_eps: float = None
    db_min_pts: int = 10
    keep_all_clusters: bool = False
    # execution
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 1 <= self.n_views <= MAX_VIEWS:
            raise ValueError(f"n_views must be in [1, {MAX_VIEWS}], got {self.n_views}")
        if not isinstance(self.backbone, str) or not self.backbone:
            raise ValueError("backbone must be 'stub' or a model file path")
        if self.backbone_dim < 1:
            raise ValueError("backbone_dim must be positive")
        if self.image_size < 8:
            raise ValueError("image_size must be at least 8")
        if self.splat_px < 1:
            raise ValueError("splat_px must be at least 1")
        if not 0 < self.fov_deg < 180:
            raise ValueError("fov_deg must lie in (0, 180)")
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.lookup not in ("nearest", "bilinear"):
            raise ValueError(f"lookup must be 'nearest' or 'bilinear', got {self.lookup!r}")
        if self.voxel_size is not None and self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if self.fpfh_radius is not None and self.fpfh_radius <= 0:
            raise ValueError("fpfh_radius must be positive")
        if self.normals_k < 3:
            raise ValueError("normals_k must be at least 3")
        if self.feature_mode not in FEATURE_MODES:
            raise ValueError(
                f"feature_mode must be one of {FEATURE_MODES}, got {self.feature_mode!r}"
            )
        if not 0.0 < self.coreset_ratio <= 1.0:
            raise ValueError("coreset_ratio must lie in (0, 1]")
        if self.image_score_mode not in ("max", "topq"):
            raise ValueError("image_score_mode must be 'max' or 'topq'")
        if not 0.0 < self.top_q <= 1.0:
            raise ValueError("top_q must lie in (0, 1]")
        if self.strip_width < 1:
            raise ValueError("strip_width must be at least 1")
        if self.ransac_threshold <= 0:
            raise ValueError("ransac_threshold must be positive")
        if self.ransac_iterations < 1:
            raise ValueError("ransac_iterations must be at least 1")
        if self.db_eps is not None and self.db_eps <= 0:
            raise ValueError("db_eps must be positive")
        if self.db_min_pts < 1:
            raise ValueError("db_min_pts must be at least 1")
        if self.jobs < 1:
            raise ValueError("jobs must be at least 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_mapping(cls, mapping):
        mapping = dict(mapping or {})
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(mapping) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**mapping)

    @classmethod
    def from_yaml(cls, text):
        data = yaml.safe_load(text)
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ValueError("config must be a flat key-value mapping")
        return cls.from_mapping(data)

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_yaml(fh.read())

    def to_yaml(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def replace(self, **overrides):
        merged = self.to_dict()
        merged.update(overrides)
        return PipelineConfig.from_mapping(merged)
