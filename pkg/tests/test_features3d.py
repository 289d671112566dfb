import numpy as np
import pytest

from cpmf.cloud import PointCloud, rotate, rotation_from_angles
from cpmf.features3d import (
    FPFH_BINS,
    FPFH_DIM,
    FeatureMatrix,
    estimate_normals,
    fpfh,
    propagate_to_full,
    spfh,
)

from conftest import plane_cloud


def reference_fpfh(positions, normals, radius):
    """Slow, loop-based descriptor used as an independent oracle."""
    n = len(positions)
    spfh_hist = np.zeros((n, FPFH_DIM))
    neighbor_sets = []
    for i in range(n):
        dists = np.linalg.norm(positions - positions[i], axis=1)
        nbrs = [j for j in range(n) if j != i and dists[j] <= radius and dists[j] > 0]
        neighbor_sets.append(nbrs)
        if not nbrs:
            continue
        incr = 100.0 / len(nbrs)
        for j in nbrs:
            d = positions[j] - positions[i]
            dist = np.linalg.norm(d)
            du = d / dist
            n1, n2 = normals[i], normals[j]
            if abs(n1 @ du) < abs(n2 @ du):
                ns, nt, du_eff, phi = n2, n1, -du, -(n2 @ du)
            else:
                ns, nt, du_eff, phi = n1, n2, du, n1 @ du
            v = np.cross(du_eff, ns)
            vn = np.linalg.norm(v)
            if vn == 0:
                continue
            v = v / vn
            w = np.cross(ns, v)
            alpha = v @ nt
            theta = np.arctan2(w @ nt, ns @ nt)
            b_alpha = min(int(FPFH_BINS * (alpha + 1) / 2), FPFH_BINS - 1)
            b_phi = min(int(FPFH_BINS * (phi + 1) / 2), FPFH_BINS - 1)
            b_theta = min(int(FPFH_BINS * (theta + np.pi) / (2 * np.pi)), FPFH_BINS - 1)
            spfh_hist[i, max(b_alpha, 0)] += incr
            spfh_hist[i, FPFH_BINS + max(b_phi, 0)] += incr
            spfh_hist[i, 2 * FPFH_BINS + max(b_theta, 0)] += incr
    out = np.zeros_like(spfh_hist)
    for i in range(n):
        nbrs = neighbor_sets[i]
        if not nbrs:
            continue
        acc = np.zeros(FPFH_DIM)
        for j in nbrs:
            acc += spfh_hist[j] / np.linalg.norm(positions[i] - positions[j])
        out[i] = spfh_hist[i] + acc / len(nbrs)
    return out


class TestFeatureMatrix:
    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            FeatureMatrix(np.array([[np.inf, 0.0]]), modality="3d")

    def test_rejects_unknown_modality(self):
        with pytest.raises(ValueError):
            FeatureMatrix(np.zeros((1, 2)), modality="4d")

    def test_shape_accessors(self):
        f = FeatureMatrix(np.zeros((4, 7)), modality="2d")
        assert (f.rows, f.dim) == (4, 7)


class TestEstimateNormals:
    def test_plane_normals(self):
        pc = plane_cloud(n_side=25)
        out = estimate_normals(pc, k=8, viewpoint=(0, 0, 1))
        np.testing.assert_allclose(out.normals, np.tile([0, 0, 1.0], (len(pc), 1)), atol=1e-3)

    def test_sphere_normals_near_radial(self):
        # Fibonacci lattice: evenly spaced, so every neighborhood is a
        # symmetric cap and the covariance normal stays radial.
        n = 1000
        i = np.arange(n)
        z = 1.0 - (2 * i + 1) / n
        r = np.sqrt(1.0 - z**2)
        phi = np.pi * (1 + np.sqrt(5.0)) * i
        direction = np.column_stack([r * np.cos(phi), r * np.sin(phi), z])
        pc = PointCloud(direction)
        out = estimate_normals(pc, k=10, viewpoint=(0, 0, 5))
        # orientation toward an outside viewpoint can flip hemispheres, so
        # compare up to sign
        cosines = np.abs(np.einsum("ij,ij->i", out.normals, direction))
        assert np.degrees(np.arccos(np.clip(cosines, -1, 1))).max() <= 5.0

    def test_unit_norm_and_orientation_invariants(self, rng):
        pc = PointCloud(rng.normal(size=(120, 3)))
        viewpoint = np.array([0.0, 0.0, 10.0])
        out = estimate_normals(pc, k=10, viewpoint=viewpoint)
        np.testing.assert_allclose(np.linalg.norm(out.normals, axis=1), 1.0, atol=1e-6)
        dots = np.einsum("ij,ij->i", out.normals, viewpoint - pc.positions)
        assert dots.min() >= -1e-9

    def test_k_larger_than_n_rejected(self):
        pc = PointCloud(np.eye(3))
        with pytest.raises(ValueError):
            estimate_normals(pc, k=5)

    def test_degenerate_line_gets_viewpoint_direction(self):
        pts = np.column_stack([np.linspace(0, 1, 10), np.zeros(10), np.zeros(10)])
        out = estimate_normals(PointCloud(pts), k=4, viewpoint=(0, 0, 2))
        # collinear neighborhoods fall back to the (normalized) viewpoint ray
        expected = np.array([0.0, 0.0, 2.0]) - pts
        expected /= np.linalg.norm(expected, axis=1, keepdims=True)
        np.testing.assert_allclose(out.normals, expected, atol=1e-12)


class TestFpfh:
    def test_dimension_is_33(self, rng):
        pc = estimate_normals(PointCloud(rng.normal(size=(40, 3))), k=6)
        assert fpfh(pc, radius=1.5).dim == FPFH_DIM == 33

    def test_plane_concentrates_in_zero_bins(self):
        pc = estimate_normals(plane_cloud(n_side=20), k=8, viewpoint=(0, 0, 1))
        f = fpfh(pc, radius=0.4)
        zero_bin = FPFH_BINS // 2
        for start in (0, FPFH_BINS, 2 * FPFH_BINS):
            sub = f.data[:, start : start + FPFH_BINS]
            frac = sub[:, zero_bin] / sub.sum(axis=1)
            assert frac.min() >= 0.99

    def test_spfh_sub_histograms_sum_to_100(self, rng):
        pc = estimate_normals(PointCloud(rng.normal(size=(50, 3))), k=6)
        hist, (_, _, _, counts) = spfh(pc, radius=1.2)
        with_neighbors = counts > 0
        for start in (0, FPFH_BINS, 2 * FPFH_BINS):
            sums = hist[with_neighbors, start : start + FPFH_BINS].sum(axis=1)
            np.testing.assert_allclose(sums, 100.0, atol=1e-6)

    def test_matches_reference_implementation(self, rng):
        pts = rng.normal(size=(35, 3))
        pc = estimate_normals(PointCloud(pts), k=5)
        got = fpfh(pc, radius=1.3).data
        want = reference_fpfh(pc.positions, pc.normals, 1.3)
        np.testing.assert_allclose(got, want, atol=1e-9)

    def test_rotation_invariance(self, rng):
        # random independent normals keep the pair source/target rule away
        # from exact-tie flips (estimated normals of neighboring points can
        # coincide to the last ulp, where the rule is discontinuous)
        normals = rng.normal(size=(60, 3))
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        pc = PointCloud(rng.normal(size=(60, 3)), normals=normals)
        base = fpfh(pc, radius=1.0).data
        for _ in range(5):
            r = rotation_from_angles(*rng.uniform(-np.pi, np.pi, size=3))
            rotated = fpfh(rotate(pc, r), radius=1.0).data
            assert np.abs(base - rotated).max() <= 1e-6

    def test_entries_finite_nonnegative(self, rng):
        pc = estimate_normals(PointCloud(rng.normal(size=(80, 3))), k=8)
        f = fpfh(pc, radius=0.8)
        assert np.isfinite(f.data).all()
        assert (f.data >= 0).all()

    def test_isolated_point_gets_zero_descriptor(self):
        pts = np.vstack([plane_cloud(6, extent=0.1).positions, [[50.0, 50.0, 50.0]]])
        normals = np.tile([0.0, 0.0, 1.0], (len(pts), 1))
        f = fpfh(PointCloud(pts, normals=normals), radius=0.2)
        assert (f.data[-1] == 0).all()
        assert (f.data[:-1].sum(axis=1) > 0).all()

    def test_requires_normals(self, rng):
        with pytest.raises(ValueError):
            fpfh(PointCloud(rng.normal(size=(5, 3))), radius=1.0)


class TestPropagate:
    def test_identity_map(self, rng):
        f = FeatureMatrix(rng.normal(size=(6, 4)), modality="3d")
        out = propagate_to_full(f, np.arange(6))
        np.testing.assert_array_equal(out.data, f.data)

    def test_all_zero_map(self, rng):
        f = FeatureMatrix(rng.normal(size=(3, 4)), modality="3d")
        out = propagate_to_full(f, np.zeros(5, dtype=int))
        np.testing.assert_array_equal(out.data, np.tile(f.data[0], (5, 1)))

    def test_mixed_map_matches_gather(self, rng):
        f = FeatureMatrix(rng.normal(size=(8, 3)), modality="3d")
        up = rng.integers(0, 8, size=20)
        out = propagate_to_full(f, up)
        for i, j in enumerate(up):
            np.testing.assert_array_equal(out.data[i], f.data[j])

    def test_out_of_range_rejected(self, rng):
        f = FeatureMatrix(rng.normal(size=(3, 2)), modality="3d")
        with pytest.raises(IndexError):
            propagate_to_full(f, np.array([0, 3]))
