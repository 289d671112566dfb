"""Point-cloud anomaly detection with complementary 3D and rendered-2D
features scored against a memory bank of normal samples."""

from .cloud import (
    OrganizedCloud,
    PointCloud,
    Rotation,
    rotate,
    rotation_from_angles,
    to_point_cloud,
    voxel_downsample,
)
from .config import PipelineConfig
from .detect import AnomalyResult, MemoryBank, load_bank, save_bank
from .features3d import FeatureMatrix, estimate_normals, fpfh, propagate_to_full
from .fusion import fuse, normalize_rows
from .metrics import GroundTruth, auroc, p_pro, scores_to_grid
from .neighbors import NeighborIndex
from .pipeline import CpmfDetector, CpmfFeatureExtractor
from .preprocess import PlaneModel, boundary_strip, ransac_plane, remove_background
from .render import CameraModel, RenderedView, ViewSchedule, fit_camera, make_schedule, project, render_view

__version__ = "0.1.0"

__all__ = [
    "AnomalyResult",
    "CameraModel",
    "CpmfDetector",
    "CpmfFeatureExtractor",
    "FeatureMatrix",
    "GroundTruth",
    "MemoryBank",
    "NeighborIndex",
    "OrganizedCloud",
    "PipelineConfig",
    "PlaneModel",
    "PointCloud",
    "RenderedView",
    "Rotation",
    "ViewSchedule",
    "auroc",
    "boundary_strip",
    "estimate_normals",
    "fit_camera",
    "fpfh",
    "fuse",
    "load_bank",
    "make_schedule",
    "normalize_rows",
    "p_pro",
    "project",
    "propagate_to_full",
    "ransac_plane",
    "remove_background",
    "render_view",
    "rotate",
    "rotation_from_angles",
    "save_bank",
    "scores_to_grid",
    "to_point_cloud",
    "voxel_downsample",
]
