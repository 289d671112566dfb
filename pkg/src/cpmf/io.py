"""File I/O: organized-scan TIFFs, ASCII PLY interchange, and PNG masks.

Organized scans are 3-channel float32 TIFFs where the channels hold the
(x, y, z) coordinates of each pixel; missing returns are encoded as z <= 0
or non-finite values. PLY is used for heatmaps and interchange; masks are
single-channel PNGs where any nonzero pixel is anomalous.
"""

import os

import numpy as np
import tifffile
from PIL import Image

from .cloud import OrganizedCloud
from .errors import FormatError

# Anchor colors of the viridis ramp, sampled uniformly on [0, 1].
_VIRIDIS = np.array(
    [
        (0.267004, 0.004874, 0.329415),
        (0.282623, 0.140926, 0.457517),
        (0.253935, 0.265254, 0.529983),
        (0.206756, 0.371758, 0.553117),
        (0.163625, 0.471133, 0.558148),
        (0.127568, 0.566949, 0.550556),
        (0.134692, 0.658636, 0.517649),
        (0.266941, 0.748751, 0.440573),
        (0.477504, 0.821444, 0.318195),
        (0.741388, 0.873449, 0.149561),
        (0.993248, 0.906157, 0.143936),
    ]
)


def load_organized_tiff(path):
    """Read an organized scan; pixels with z <= 0 or non-finite values are invalid."""
    try:
        data = tifffile.imread(path)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise FormatError(f"{path}: unreadable TIFF ({exc})") from exc
    data = np.asarray(data)
    if data.ndim != 3 or data.shape[2] != 3:
        raise FormatError(
            f"{path}: expected 3 channels (x, y, z) per pixel, got shape {data.shape}"
        )
    if data.dtype != np.float32:
        raise FormatError(f"{path}: expected float32 samples, got {data.dtype}")
    points = data.astype(np.float64)
    finite = np.isfinite(points).all(axis=2)
    valid = finite & (np.where(finite, points[:, :, 2], -np.inf) > 0.0)
    points = np.where(valid[:, :, None], points, 0.0)
    return OrganizedCloud(points=points, valid=valid)


def save_organized_tiff(path, oc):
    """Companion writer: invalid pixels are stored as all-zero (z = 0)."""
    grid = np.where(oc.valid[:, :, None], oc.points, 0.0).astype(np.float32)
    tifffile.imwrite(path, grid, photometric="rgb")


def save_ply(path, positions, normals=None, colors=None):
    """Write an ASCII PLY with positions, optional normals, optional uint8 RGB."""
    positions = np.asarray(positions, dtype=np.float64)
    columns = [positions]
    header = [
        "ply",
        "format ascii 1.0",
        f"element vertex {positions.shape[0]}",
        "property float x",
        "property float y",
        "property float z",
    ]
    fmts = ["%.9g", "%.9g", "%.9g"]
    if normals is not None:
        header += ["property float nx", "property float ny", "property float nz"]
        columns.append(np.asarray(normals, dtype=np.float64))
        fmts += ["%.9g", "%.9g", "%.9g"]
    if colors is not None:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
        columns.append(np.asarray(colors, dtype=np.uint8))
        fmts += ["%d", "%d", "%d"]
    header.append("end_header")
    body = np.column_stack(columns)
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(header) + "\n")
        np.savetxt(fh, body, fmt=" ".join(fmts))


def load_ply(path):
    """Read an ASCII PLY written by :func:`save_ply` (or compatible).

    Returns (positions, normals, colors); missing blocks are None.
    """
    with open(path, "r", encoding="ascii") as fh:
        line = fh.readline().strip()
        if line != "ply":
            raise FormatError(f"{path}: not a PLY file")
        properties = []
        count = None
        fmt = None
        while True:
            line = fh.readline()
            if not line:
                raise FormatError(f"{path}: missing end_header")
            line = line.strip()
            if line == "end_header":
                break
            parts = line.split()
            if parts[0] == "format":
                fmt = parts[1]
            elif parts[0] == "element":
                if parts[1] != "vertex":
                    raise FormatError(f"{path}: only vertex elements are supported")
                count = int(parts[2])
            elif parts[0] == "property":
                properties.append(parts[2])
        if fmt != "ascii":
            raise FormatError(f"{path}: only ASCII PLY is supported")
        if count is None:
            raise FormatError(f"{path}: missing vertex element")
        data = np.loadtxt(fh, ndmin=2, max_rows=count) if count else np.empty((0, 0))
    if count and data.shape != (count, len(properties)):
        raise FormatError(f"{path}: vertex data does not match header")

    def block(names):
        try:
            cols = [properties.index(n) for n in names]
        except ValueError:
            return None
        return data[:, cols]

    positions = block(["x", "y", "z"])
    if positions is None:
        raise FormatError(f"{path}: missing x/y/z properties")
    normals = block(["nx", "ny", "nz"])
    colors = block(["red", "green", "blue"])
    if colors is not None:
        colors = colors.astype(np.uint8)
    return positions, normals, colors


def load_mask_png(path, expected_shape=None):
    """Read a ground-truth mask; any nonzero pixel counts as anomalous."""
    with Image.open(path) as img:
        arr = np.asarray(img)
    if arr.ndim == 3:
        arr = arr[:, :, 0]
    mask = arr != 0
    if expected_shape is not None and mask.shape != tuple(expected_shape):
        raise FormatError(
            f"{path}: mask shape {mask.shape} does not match scan {tuple(expected_shape)}"
        )
    return mask


def save_mask_png(path, mask):
    Image.fromarray(np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)).save(path)


def save_image_png(path, image):
    """Write an (H, W, 3) float image in [0, 1] as 8-bit PNG, linear scale."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8)).save(path)


def score_colors(scores, lo, hi):
    """Map scores to uint8 RGB via a viridis-style ramp over [lo, hi]."""
    scores = np.asarray(scores, dtype=np.float64)
    span = hi - lo
    t = np.zeros_like(scores) if span <= 0 else np.clip((scores - lo) / span, 0.0, 1.0)
    pos = t * (len(_VIRIDIS) - 1)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, len(_VIRIDIS) - 1)
    frac = (pos - i0)[:, None]
    rgb = _VIRIDIS[i0] * (1.0 - frac) + _VIRIDIS[i1] * frac
    return np.round(rgb * 255.0).astype(np.uint8)


def atomic_write(path, write_fn):
    """Write via a temp file in the same directory, then rename into place."""
    directory = os.path.dirname(os.path.abspath(path))
    tmp = os.path.join(directory, f".{os.path.basename(path)}.tmp{os.getpid()}")
    try:
        write_fn(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
