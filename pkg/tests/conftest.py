import numpy as np
import pytest

from cpmf.cloud import OrganizedCloud, PointCloud
from cpmf.synthetic import write_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def grid_cloud(height, width, z=1.0, valid=None):
    """Organized cloud whose (x, y) are pixel coordinates in meters."""
    cols, rows = np.meshgrid(np.arange(width, dtype=float), np.arange(height, dtype=float))
    points = np.stack([cols, rows, np.full_like(cols, z)], axis=2)
    if valid is None:
        valid = np.ones((height, width), dtype=bool)
    return OrganizedCloud(points=points, valid=valid)


def plane_cloud(n_side=20, extent=1.0, z=0.0):
    g = np.linspace(-extent, extent, n_side)
    xx, yy = np.meshgrid(g, g)
    pts = np.stack([xx.ravel(), yy.ravel(), np.full(xx.size, z)], axis=1)
    return PointCloud(pts)


@pytest.fixture(scope="session")
def synthetic_dataset(tmp_path_factory):
    """Small plate dataset in the scanner directory layout, written once."""
    root = tmp_path_factory.mktemp("plates")
    write_dataset(root, n_train=3, n_test_good=2, test_defects=("dent",), seed=0)
    return root / "plate"
