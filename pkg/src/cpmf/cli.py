"""Command-line front end: fit a memory bank on normal scans, score test
scans, evaluate against ground-truth masks, and dump rendered views.

Exit codes: 0 ok, 2 usage/input problem, 3 data corruption, 4 internal.
Options may also be set through CPMF_<COMMAND>_<OPTION> environment
variables (click's auto-envvar scheme).
"""

import functools
import json
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import detect
from .backbones import make_backend
from .cloud import voxel_downsample
from .config import PipelineConfig
from .errors import BankFormatError, CpmfError, UndefinedMetricError
from .features3d import FPFH_DIM, estimate_normals
from .io import atomic_write, load_mask_png, save_image_png, save_ply, score_colors
from .metrics import GroundTruth, auroc, p_pro
from .pipeline import (
    _map_jobs,
    extract_foreground,
    extract_fused_features,
    load_scan,
)
from .render import fit_camera, make_schedule, render_view


def _fail(code, message):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except SystemExit:
            raise
        except BankFormatError as exc:
            _fail(3, str(exc))
        except (CpmfError, ValueError, TypeError, OSError) as exc:
            _fail(2, str(exc))
        except Exception as exc:  # pragma: no cover - defensive
            _fail(4, f"internal: {exc!r}")

    return wrapper


def _pipeline_options(fn):
    options = [
        click.option("--config", "config_path", type=click.Path(exists=False), default=None,
                     help="YAML config file; flags below override it."),
        click.option("--seed", type=int, default=None, help="Override the config seed."),
        click.option("--views", type=int, default=None, help="Override the view count."),
        click.option("--feature-mode", type=click.Choice(["2d", "3d", "cpmf"]), default=None,
                     help="Override the feature combination."),
        click.option("--jobs", type=int, default=None, help="Worker pool width."),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def _load_config(config_path, seed, views, feature_mode, jobs):
    if config_path is not None:
        if not os.path.isfile(config_path):
            _fail(2, f"config file not found: {config_path}")
        config = PipelineConfig.load(config_path)
    else:
        config = PipelineConfig()
    overrides = {}
    if seed is not None:
        overrides["seed"] = seed
    if views is not None:
        overrides["n_views"] = views
    if feature_mode is not None:
        overrides["feature_mode"] = feature_mode
    if jobs is not None:
        overrides["jobs"] = jobs
    return config.replace(**overrides) if overrides else config


def _find_scans(root, what):
    root = Path(root)
    if not root.is_dir():
        _fail(2, f"{what} not found: {root}")
    scans = sorted(root.rglob("*.tiff")) + sorted(root.rglob("*.tif"))
    if not scans:
        _fail(2, f"{what} contains no .tiff scans: {root}")
    return scans


def _scan_labels(path, root):
    """(class name, defect category) inferred from the directory layout."""
    parts = Path(path).resolve().parts
    category = "unknown"
    class_name = "default"
    if len(parts) >= 2 and parts[-2] == "xyz" and len(parts) >= 3:
        category = parts[-3]
    for marker in ("test", "train"):
        if marker in parts:
            idx = parts.index(marker)
            if idx > 0:
                class_name = parts[idx - 1]
            break
    return class_name, category


def _feature_dim(config):
    if config.feature_mode == "3d":
        return FPFH_DIM
    if config.feature_mode == "2d":
        return config.backbone_dim
    return config.backbone_dim + FPFH_DIM


@click.group(context_settings={"auto_envvar_prefix": "CPMF"})
def main():
    """Point-cloud anomaly detection: fused 3D/2D features scored against a
    memory bank of normal scans."""


@main.command()
@click.argument("train_dir", type=click.Path())
@click.argument("bank_out", type=click.Path())
@_pipeline_options
@_guarded
def fit(train_dir, bank_out, config_path, seed, views, feature_mode, jobs):
    """Build a memory bank from the normal scans under TRAIN_DIR."""
    config = _load_config(config_path, seed, views, feature_mode, jobs)
    scans = _find_scans(train_dir, "train_dir")
    backend = None if config.feature_mode == "3d" else make_backend(
        config.backbone, dim=config.backbone_dim
    )

    def featurize(path):
        fg = extract_foreground(str(path), config)
        features, _ = extract_fused_features(fg, config, backend=backend)
        return features

    featurized = _map_jobs(featurize, scans, config.jobs)
    for path, features in zip(scans, featurized):
        click.echo(f"{path.name}: {features.rows} points")
    bank = detect.fit(featurized, coreset_ratio=config.coreset_ratio, seed=config.seed)
    out_dir = os.path.dirname(os.path.abspath(bank_out))
    os.makedirs(out_dir, exist_ok=True)
    atomic_write(bank_out, lambda tmp: detect.save_bank(tmp, bank))
    click.echo(f"bank: M={bank.rows} dim={bank.dim} -> {bank_out}")


@main.command()
@click.argument("bank_in", type=click.Path())
@click.argument("test_dir", type=click.Path())
@click.argument("out_dir", type=click.Path())
@_pipeline_options
@_guarded
def score(bank_in, test_dir, out_dir, config_path, seed, views, feature_mode, jobs):
    """Score every scan under TEST_DIR against a saved bank; write per-scan
    score JSON files and heatmap PLYs into OUT_DIR."""
    config = _load_config(config_path, seed, views, feature_mode, jobs)
    if not os.path.isfile(bank_in):
        _fail(2, f"bank file not found: {bank_in}")
    bank = detect.load_bank(bank_in)
    expected = _feature_dim(config)
    if bank.dim != expected:
        _fail(
            2,
            f"bank dimension {bank.dim} does not match configured feature "
            f"dimension {expected} (feature_mode={config.feature_mode})",
        )
    scans = _find_scans(test_dir, "test_dir")
    backend = None if config.feature_mode == "3d" else make_backend(
        config.backbone, dim=config.backbone_dim
    )

    def run(path):
        scan = load_scan(str(path))
        fg = extract_foreground(scan, config)
        features, full = extract_fused_features(fg, config, backend=backend)
        result = detect.score(
            bank,
            features,
            origin_index=full.origin_index,
            image_score_mode=config.image_score_mode,
            top_q=config.top_q,
        )
        return scan, full, result

    outputs = _map_jobs(run, scans, config.jobs)
    floor = min(float(r.point_scores.min()) for _, _, r in outputs)
    ceiling = max(float(r.point_scores.max()) for _, _, r in outputs)

    test_root = Path(test_dir)
    for path, (scan, full, result) in zip(scans, outputs):
        rel = path.relative_to(test_root)
        class_name, category = _scan_labels(path, test_root)
        stem_path = Path(out_dir) / rel.parent / rel.stem
        os.makedirs(stem_path.parent, exist_ok=True)

        payload = {
            "schema": "cpmf-scores-v1",
            "source": rel.as_posix(),
            "class_name": class_name,
            "category": category,
            "height": scan.height,
            "width": scan.width,
            "image_score": result.image_score,
            "score_floor": floor,
            "score_ceiling": ceiling,
            "point_scores": result.point_scores.tolist(),
            "origin_pixels": result.origin_index.tolist(),
        }
        text = json.dumps(payload, sort_keys=True)
        json_path = f"{stem_path}_scores.json"
        atomic_write(json_path, lambda tmp, text=text: Path(tmp).write_text(text))

        colors = score_colors(result.point_scores, floor, ceiling)
        ply_path = f"{stem_path}_heatmap.ply"
        atomic_write(
            ply_path,
            lambda tmp, full=full, colors=colors: save_ply(
                tmp, full.positions, normals=full.normals, colors=colors
            ),
        )
        click.echo(f"{rel.as_posix()}: image_score={result.image_score:.6g}")


def _mask_for(payload, gt_root):
    """Locate the ground-truth mask for one scored scan, or None."""
    source = Path(payload["source"])
    stem = source.stem
    candidates = []
    parts = source.parts
    if "xyz" in parts:
        swapped = Path(*["gt" if p == "xyz" else p for p in parts])
        candidates.append(gt_root / swapped.with_suffix(".png"))
    candidates.append(gt_root / payload["category"] / f"{stem}.png")
    candidates.append(gt_root / f"{stem}.png")
    for cand in candidates:
        if cand.is_file():
            return cand
    return None


@main.command("eval")
@click.argument("scores_dir", type=click.Path())
@click.argument("gt_dir", type=click.Path())
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="Where to write the metrics JSON (default: scores_dir/metrics.json).")
@click.option("--fpr-max", type=float, default=0.3, show_default=True,
              help="False-positive-rate cap for the PRO area.")
@_guarded
def eval_cmd(scores_dir, gt_dir, out_path, fpr_max):
    """Compute per-class image AUROC and PRO area from score JSONs and
    ground-truth masks."""
    scores_root = Path(scores_dir)
    if not scores_root.is_dir():
        _fail(2, f"scores_dir not found: {scores_dir}")
    gt_root = Path(gt_dir)
    json_paths = sorted(scores_root.rglob("*_scores.json"))
    if not json_paths:
        _fail(2, f"scores_dir contains no score files: {scores_dir}")

    per_class = {}
    skipped = []
    for jp in json_paths:
        payload = json.loads(jp.read_text())
        shape = (payload["height"], payload["width"])
        if payload["category"] == "good":
            mask = np.zeros(shape, dtype=bool)
        else:
            mask_path = _mask_for(payload, gt_root)
            if mask_path is None:
                skipped.append(payload["source"])
                continue
            mask = load_mask_png(mask_path, expected_shape=shape)
        grid = np.zeros(shape)
        origin = np.asarray(payload["origin_pixels"], dtype=np.int64)
        grid[origin[:, 0], origin[:, 1]] = payload["point_scores"]
        gt = GroundTruth.from_mask(mask)
        per_class.setdefault(payload["class_name"], []).append(
            (payload["image_score"], gt, grid.ravel())
        )

    for source in skipped:
        click.echo(f"skipped (no mask): {source}", err=True)
    if not per_class:
        _fail(2, "every scored cloud was skipped; no ground truth found")

    def show(value):
        return "undefined" if value is None else f"{value:.4f}"

    metrics = {"per_class": {}, "mean": {}}
    for class_name in sorted(per_class):
        entries = per_class[class_name]
        image_scores = [e[0] for e in entries]
        image_labels = [e[1].image_label for e in entries]
        try:
            i_roc = auroc(image_scores, image_labels)
        except UndefinedMetricError:
            i_roc = None
        try:
            pro = p_pro([e[2] for e in entries], [e[1] for e in entries], fpr_max=fpr_max)
        except UndefinedMetricError:
            pro = None
        metrics["per_class"][class_name] = {
            "i_roc": i_roc,
            "p_pro": pro,
            "n_images": len(entries),
        }
        click.echo(f"{class_name}: i_roc={show(i_roc)} p_pro={show(pro)} n={len(entries)}")
    classes = metrics["per_class"].values()
    for key in ("i_roc", "p_pro"):
        defined = [c[key] for c in classes if c[key] is not None]
        metrics["mean"][key] = float(np.mean(defined)) if defined else None
    click.echo(
        f"mean: i_roc={show(metrics['mean']['i_roc'])} p_pro={show(metrics['mean']['p_pro'])}"
    )
    out_path = out_path or str(scores_root / "metrics.json")
    text = json.dumps(metrics, sort_keys=True)
    atomic_write(out_path, lambda tmp: Path(tmp).write_text(text))
    return 0


@main.command("render-debug")
@click.argument("scan", type=click.Path())
@click.argument("out_dir", type=click.Path())
@_pipeline_options
@_guarded
def render_debug(scan, out_dir, config_path, seed, views, feature_mode, jobs):
    """Dump the rendered views of one scan as PNG images."""
    config = _load_config(config_path, seed, views, feature_mode, jobs)
    if not os.path.isfile(scan):
        _fail(2, f"scan not found: {scan}")
    fg = extract_foreground(str(scan), config)
    extent = fg.positions.max(axis=0) - fg.positions.min(axis=0)
    voxel = config.voxel_size
    if voxel is None:
        voxel = max(0.005 * float(np.linalg.norm(extent)), 1e-9)
    ds, up_map = voxel_downsample(fg, voxel)
    ds = estimate_normals(ds, k=min(config.normals_k, len(ds)))
    full = fg.with_normals(ds.normals[up_map])
    cam = fit_camera(
        full,
        fov_deg=config.fov_deg,
        margin=config.margin,
        width=config.image_size,
        height=config.image_size,
    )
    schedule = make_schedule(config.n_views)
    os.makedirs(out_dir, exist_ok=True)
    for k, rotation in enumerate(schedule.rotations):
        view = render_view(full, cam, rotation, splat_px=config.splat_px, rotation_id=k)
        out = os.path.join(out_dir, f"view_{k:02d}.png")
        save_image_png(out, view.image)
        click.echo(out)


if __name__ == "__main__":
    main()
