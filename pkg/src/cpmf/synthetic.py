"""Deterministic synthetic range scans: a tilted background plane with a
raised plate, optionally dented or bumped. Used for self-contained tests
and demos; scans mimic the organized-TIFF layout of real scanners."""

import os

import numpy as np

from .cloud import OrganizedCloud
from .io import save_mask_png, save_organized_tiff

PLATE_PARAMS = dict(
    size=80,            # grid side, pixels
    pitch=0.001,        # meters per pixel
    plate_half=22,      # plate half-width, pixels
    plate_height=0.05,  # plate-to-plane clearance, meters
    noise_sigma=0.0002, # surface noise, meters
    defect_radius=5,    # pixels
    defect_depth_sigmas=5.0,  # defect depth as a multiple of noise_sigma
    z_background=0.6,
    tilt=(0.03, -0.02),
    dropout=0.01,       # fraction of pixels without a return
)


def make_plate_scan(seed, defect=None, params=PLATE_PARAMS):
    """One organized scan plus its anomaly mask.

    ``defect`` is None, "dent" (pressed away from the sensor) or "bump"
    (raised toward it), centered at a seeded spot on the plate. The mask
    marks pixels whose displacement exceeds half the defect depth.
    """
    if defect not in (None, "dent", "bump"):
        raise ValueError(f"defect must be None, 'dent' or 'bump', got {defect!r}")
    p = dict(params)
    rng = np.random.default_rng(seed)
    size = p["size"]
    pitch = p["pitch"]

    cols = (np.arange(size) - size / 2.0) * pitch
    rows = (np.arange(size) - size / 2.0) * pitch
    x, y = np.meshgrid(cols, rows)
    z = p["z_background"] + p["tilt"][0] * x + p["tilt"][1] * y
    z = z + rng.normal(0.0, p["noise_sigma"], size=(size, size))

    half = p["plate_half"]
    lo, hi = size // 2 - half, size // 2 + half
    plate = np.zeros((size, size), dtype=bool)
    plate[lo:hi, lo:hi] = True
    z[plate] -= p["plate_height"]

    mask = np.zeros((size, size), dtype=bool)
    if defect is not None:
        depth = p["defect_depth_sigmas"] * p["noise_sigma"]
        radius = p["defect_radius"]
        margin = radius + 4
        cr = int(rng.integers(lo + margin, hi - margin))
        cc = int(rng.integers(lo + margin, hi - margin))
        rr, cc_grid = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
        d2 = (rr - cr) ** 2 + (cc_grid - cc) ** 2
        bump_shape = depth * np.exp(-d2 / (2.0 * (radius / 2.0) ** 2))
        displacement = np.where(plate, bump_shape, 0.0)
        z = z + displacement if defect == "dent" else z - displacement
        mask = plate & (displacement > 0.5 * depth)

    valid = rng.random((size, size)) >= p["dropout"]
    points = np.stack([x, y, np.where(valid, z, 0.0)], axis=2)
    return OrganizedCloud(points=points, valid=valid), mask


def write_dataset(
    root,
    class_name="plate",
    n_train=10,
    n_test_good=3,
    test_defects=("dent", "bump", "dent"),
    seed=0,
    params=PLATE_PARAMS,
):
    """Write a miniature dataset in the scanner-style directory layout:
    ``<class>/train/good/xyz/*.tiff``, ``<class>/test/<defect>/xyz/*.tiff``
    with masks under the sibling ``gt/`` directory."""
    base = os.path.join(root, class_name)
    made = {"train": [], "test": []}

    train_dir = os.path.join(base, "train", "good", "xyz")
    os.makedirs(train_dir, exist_ok=True)
    for i in range(n_train):
        oc, _ = make_plate_scan(seed=seed + i, params=params)
        path = os.path.join(train_dir, f"{i:03d}.tiff")
        save_organized_tiff(path, oc)
        made["train"].append(path)

    good_dir = os.path.join(base, "test", "good", "xyz")
    os.makedirs(good_dir, exist_ok=True)
    for i in range(n_test_good):
        oc, _ = make_plate_scan(seed=seed + 1000 + i, params=params)
        path = os.path.join(good_dir, f"{i:03d}.tiff")
        save_organized_tiff(path, oc)
        made["test"].append(path)

    for i, defect in enumerate(test_defects):
        xyz_dir = os.path.join(base, "test", defect, "xyz")
        gt_dir = os.path.join(base, "test", defect, "gt")
        os.makedirs(xyz_dir, exist_ok=True)
        os.makedirs(gt_dir, exist_ok=True)
        oc, mask = make_plate_scan(seed=seed + 2000 + i, defect=defect, params=params)
        stem = f"{i:03d}"
        path = os.path.join(xyz_dir, f"{stem}.tiff")
        save_organized_tiff(path, oc)
        save_mask_png(os.path.join(gt_dir, f"{stem}.png"), mask)
        made["test"].append(path)
    return made
