import numpy as np
import pytest

from cpmf.backbones import (
    IMAGENET_MEAN,
    IMAGENET_STD,
    OnnxBackend,
    StubBackend,
    bilinear_resize,
    make_backend,
)
from cpmf.cloud import PointCloud
from cpmf.features2d import (
    ViewError,
    ViewFeatures,
    aggregate_views,
    align_to_points,
    extract_2d_modality,
    extract_feature_map,
)
from cpmf.features3d import FeatureMatrix
from cpmf.render import RenderedView, fit_camera, make_schedule, render_view


@pytest.fixture(scope="module")
def stub():
    return StubBackend()


def small_cloud(rng, n=60):
    pts = rng.uniform(-0.03, 0.03, size=(n, 3))
    pts[:, 2] = 0.5 + 0.001 * rng.normal(size=n)
    normals = rng.normal(size=(n, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(pts, normals=normals)


class ConstantBackend:
    """Trivial backend for algebraic tests: every channel is a constant."""

    dim = 4
    channel_mean = IMAGENET_MEAN
    channel_std = IMAGENET_STD
    expected_size = None

    def __init__(self, value=1.0):
        self.value = value

    def infer(self, normalized_image):
        h, w = normalized_image.shape[:2]
        return [np.full((h, w, self.dim), self.value)]


class TestBilinearResize:
    def test_matches_opencv(self, rng):
        import cv2

        arr = rng.normal(size=(9, 7, 3))
        mine = bilinear_resize(arr, 31, 23)
        ref = cv2.resize(arr, (23, 31), interpolation=cv2.INTER_LINEAR)
        np.testing.assert_allclose(mine, ref, atol=1e-12)

    def test_identity_size(self, rng):
        arr = rng.normal(size=(5, 5, 2))
        np.testing.assert_array_equal(bilinear_resize(arr, 5, 5), arr)

    def test_constant_preserved(self):
        out = bilinear_resize(np.full((4, 4, 2), 3.5), 9, 13)
        np.testing.assert_allclose(out, 3.5)


class TestExtractFeatureMap:
    def test_stub_declared_dim_448(self, stub):
        image = np.full((32, 32, 3), 0.4)
        feature_map = extract_feature_map(stub, image)
        assert feature_map.shape == (32, 32, 448)
        assert stub.dim == 448

    def test_deterministic(self, stub, rng):
        image = rng.uniform(size=(32, 32, 3))
        a = extract_feature_map(stub, image)
        b = extract_feature_map(stub, image)
        np.testing.assert_array_equal(a, b)

    def test_constant_image_gives_constant_map(self, stub):
        feature_map = extract_feature_map(stub, np.full((24, 24, 3), 0.6))
        assert np.abs(feature_map - feature_map[0, 0]).max() <= 1e-12

    def test_out_of_range_values_rejected(self, stub):
        with pytest.raises(ValueError):
            extract_feature_map(stub, np.full((8, 8, 3), 1.5))

    def test_size_mismatch_rejected(self):
        backend = ConstantBackend()
        backend.expected_size = (16, 16)
        with pytest.raises(ValueError, match="expects"):
            extract_feature_map(backend, np.zeros((8, 8, 3)))

    def test_declared_dim_enforced(self):
        class LyingBackend(ConstantBackend):
            dim = 7  # declares 7 but infer() still emits 4 channels

            def infer(self, normalized_image):
                h, w = normalized_image.shape[:2]
                return [np.zeros((h, w, 4))]

        with pytest.raises(ValueError, match="declared dim"):
            extract_feature_map(LyingBackend(), np.zeros((8, 8, 3)))


class TestAlignToPoints:
    def make_view(self, pix, h=8, w=8, visible=None):
        pix = np.asarray(pix, dtype=float)
        n = len(pix)
        depth = np.ones(n)
        behind = ~np.isfinite(pix).all(axis=1)
        depth[behind] = -1.0
        if visible is None:
            visible = ~behind
        return RenderedView(
            image=np.ones((h, w, 3)),
            pix=pix,
            depth=depth,
            visible=visible,
            rotation_id=0,
        )

    def test_constant_map(self):
        view = self.make_view([[1.2, 3.4], [6.9, 0.1]])
        fmap = np.full((8, 8, 5), 2.5)
        vf = align_to_points(fmap, view)
        np.testing.assert_array_equal(vf.features.data, np.full((2, 5), 2.5))

    def test_exact_pixel_indexing_row_is_y(self, rng):
        fmap = rng.normal(size=(8, 8, 3))
        view = self.make_view([[3.0, 7.0]])
        vf = align_to_points(fmap, view)
        np.testing.assert_array_equal(vf.features.data[0], fmap[7, 3])

    def test_behind_camera_gets_zero_and_flag(self, rng):
        fmap = rng.normal(size=(8, 8, 3))
        view = self.make_view([[np.nan, np.nan], [2.0, 2.0]])
        vf = align_to_points(fmap, view)
        assert (vf.features.data[0] == 0).all()
        assert vf.visible.tolist() == [False, True]

    def test_out_of_bounds_clamped(self, rng):
        fmap = rng.normal(size=(8, 8, 2))
        view = self.make_view([[-3.0, 100.0]], visible=np.array([False]))
        vf = align_to_points(fmap, view)
        np.testing.assert_array_equal(vf.features.data[0], fmap[7, 0])

    def test_bilinear_lookup(self, rng):
        fmap = rng.normal(size=(4, 4, 2))
        view = self.make_view([[1.5, 2.0]], h=4, w=4)
        vf = align_to_points(fmap, view, lookup="bilinear")
        np.testing.assert_allclose(vf.features.data[0], 0.5 * (fmap[2, 1] + fmap[2, 2]))

    def test_size_mismatch_rejected(self, rng):
        view = self.make_view([[0.0, 0.0]])
        with pytest.raises(ValueError):
            align_to_points(rng.normal(size=(4, 4, 2)), view)


def make_view_features(data, visible, rotation_id):
    return ViewFeatures(
        features=FeatureMatrix(data, modality="2d"),
        visible=np.asarray(visible, dtype=bool),
        rotation_id=rotation_id,
    )


class TestAggregateViews:
    def test_identical_views_mean_is_identity(self, rng):
        data = rng.normal(size=(5, 3))
        views = [make_view_features(data, np.ones(5), k) for k in range(4)]
        out = aggregate_views(views)
        np.testing.assert_allclose(out.data, data, atol=0)

    def test_two_views_average(self, rng):
        a = rng.normal(size=(4, 2))
        b = rng.normal(size=(4, 2))
        out = aggregate_views(
            [make_view_features(a, np.ones(4), 0), make_view_features(b, np.ones(4), 1)]
        )
        np.testing.assert_allclose(out.data, (a + b) / 2.0)

    def test_single_view_identity(self, rng):
        data = rng.normal(size=(3, 2))
        out = aggregate_views([make_view_features(data, np.ones(3), 0)])
        np.testing.assert_array_equal(out.data, data)

    def test_k_copies_identity(self, rng):
        # bit-exact for power-of-two k; other counts round in the last ulp
        # (summing k equal doubles is inexact for k = 3, 5, 6, 7)
        data = rng.normal(size=(6, 4))
        for k in (2, 4):
            views = [make_view_features(data, np.ones(6), i) for i in range(k)]
            np.testing.assert_array_equal(aggregate_views(views).data, data)
        for k in (3, 5, 7, 8):
            views = [make_view_features(data, np.ones(6), i) for i in range(k)]
            np.testing.assert_allclose(aggregate_views(views).data, data, rtol=1e-15)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            aggregate_views([])

    def test_mask_occluded_uses_visible_views_only(self):
        a = make_view_features(np.array([[2.0], [4.0]]), [True, False], 0)
        b = make_view_features(np.array([[6.0], [8.0]]), [True, False], 1)
        out = aggregate_views([a, b], mask_occluded=True)
        assert out.data[0, 0] == 4.0   # mean of visible views
        assert out.data[1, 0] == 6.0   # fallback: all-view mean

    def test_summation_order_is_rotation_id(self, rng):
        views = [make_view_features(rng.normal(size=(4, 2)), np.ones(4), k) for k in range(5)]
        shuffled = [views[i] for i in (3, 0, 4, 2, 1)]
        np.testing.assert_array_equal(
            aggregate_views(views).data, aggregate_views(shuffled).data
        )


class TestExtract2dModality:
    def test_constant_backend_single_view(self, rng):
        pc = small_cloud(rng)
        cam = fit_camera(pc, width=32, height=32)
        out = extract_2d_modality(pc, make_schedule(1), cam, ConstantBackend(2.0))
        np.testing.assert_allclose(out.data, 2.0)

    def test_shape_contract(self, stub, rng):
        pc = small_cloud(rng, n=40)
        cam = fit_camera(pc, width=32, height=32)
        out = extract_2d_modality(pc, make_schedule(2), cam, stub)
        assert out.data.shape == (40, stub.dim)
        assert np.isfinite(out.data).all()

    def test_matches_manual_out_of_order_processing(self, stub, rng):
        from cpmf.features2d import aggregate_views as agg

        pc = small_cloud(rng, n=30)
        cam = fit_camera(pc, width=32, height=32)
        schedule = make_schedule(3)
        pipeline = extract_2d_modality(pc, schedule, cam, stub)
        views = []
        for k in (2, 0, 1):  # deliberately out of order
            rendered = render_view(pc, cam, schedule.rotations[k], splat_px=2, rotation_id=k)
            fmap = extract_feature_map(stub, rendered.image)
            views.append(align_to_points(fmap, rendered))
        np.testing.assert_array_equal(pipeline.data, agg(views).data)

    def test_alignment_locality(self, rng):
        # perturbing the map only where no point projects leaves features alone
        pc = small_cloud(rng, n=25)
        cam = fit_camera(pc, width=32, height=32)
        rendered = render_view(pc, cam, None, splat_px=2, rotation_id=0)
        fmap = rng.normal(size=(32, 32, 6))
        base = align_to_points(fmap, rendered).features.data
        hit = np.zeros((32, 32), dtype=bool)
        px = np.rint(rendered.pix).astype(int)
        hit[px[:, 1], px[:, 0]] = True
        perturbed = fmap + (~hit)[:, :, None] * rng.normal(size=(32, 32, 6))
        np.testing.assert_array_equal(
            align_to_points(perturbed, rendered).features.data, base
        )

    def test_view_error_carries_index(self, rng):
        class FailingBackend(ConstantBackend):
            def __init__(self):
                super().__init__()
                self.calls = 0

            def infer(self, normalized_image):
                self.calls += 1
                if self.calls == 2:
                    raise RuntimeError("backend exploded")
                return super().infer(normalized_image)

        pc = small_cloud(rng, n=10)
        cam = fit_camera(pc, width=16, height=16)
        with pytest.raises(ViewError, match="view 1"):
            extract_2d_modality(pc, make_schedule(3), cam, FailingBackend())

    def test_end_to_end_determinism(self, stub, rng):
        pc = small_cloud(rng, n=30)
        cam = fit_camera(pc, width=32, height=32)
        a = extract_2d_modality(pc, make_schedule(2), cam, stub)
        b = extract_2d_modality(pc, make_schedule(2), cam, stub)
        np.testing.assert_array_equal(a.data, b.data)


class FakeTensorMeta:
    def __init__(self, name, shape):
        self.name = name
        self.shape = shape


class FakeOnnxSession:
    """Mimics the onnxruntime InferenceSession surface: one NCHW input,
    three feature-map outputs at strides 1, 2, 4."""

    def __init__(self, h=16, w=16):
        self._h, self._w = h, w
        self.last_input = None

    def get_inputs(self):
        return [FakeTensorMeta("image", [1, 3, self._h, self._w])]

    def run(self, outputs, feeds):
        x = feeds["image"]
        assert x.shape == (1, 3, self._h, self._w)
        assert x.dtype == np.float32
        self.last_input = x
        h, w = self._h, self._w
        mean = float(x.mean())
        return [
            np.full((1, 64, h, w), mean, dtype=np.float32),
            np.full((1, 128, h // 2, w // 2), 2 * mean, dtype=np.float32),
            np.full((1, 256, h // 4, w // 4), 3 * mean, dtype=np.float32),
        ]


class TestOnnxBackend:
    def test_fake_session_round_trip(self):
        session = FakeOnnxSession()
        backend = OnnxBackend("unused.onnx", dim=448, session=session)
        assert backend.expected_size == (16, 16)
        image = np.full((16, 16, 3), 0.5)
        fmap = extract_feature_map(backend, image)
        assert fmap.shape == (16, 16, 448)
        # blocks arrive channel-concatenated in declaration order
        mean = session.last_input.mean()
        np.testing.assert_allclose(fmap[0, 0, :64], mean, rtol=1e-6)
        np.testing.assert_allclose(fmap[0, 0, 64:192], 2 * mean, rtol=1e-6)
        np.testing.assert_allclose(fmap[0, 0, 192:], 3 * mean, rtol=1e-6)

    def test_normalization_applied_before_inference(self):
        session = FakeOnnxSession()
        backend = OnnxBackend("unused.onnx", dim=448, session=session)
        extract_feature_map(backend, np.full((16, 16, 3), 0.5))
        expected = (0.5 - np.asarray(IMAGENET_MEAN)) / np.asarray(IMAGENET_STD)
        got = session.last_input[0, :, 0, 0]
        np.testing.assert_allclose(got, expected.astype(np.float32), rtol=1e-6)

    def test_wrong_image_size_rejected(self):
        backend = OnnxBackend("unused.onnx", dim=448, session=FakeOnnxSession())
        with pytest.raises(ValueError):
            extract_feature_map(backend, np.zeros((8, 8, 3)))

    def test_multi_input_model_rejected(self):
        class TwoInputSession(FakeOnnxSession):
            def get_inputs(self):
                return [FakeTensorMeta("a", [1, 3, 8, 8]), FakeTensorMeta("b", [1, 3, 8, 8])]

        with pytest.raises(ValueError, match="one input"):
            OnnxBackend("unused.onnx", session=TwoInputSession())

    def test_missing_runtime_reported(self, tmp_path):
        try:
            import onnxruntime  # noqa: F401

            pytest.skip("onnxruntime installed; error path not reachable")
        except ImportError:
            pass
        with pytest.raises(ImportError, match="onnxruntime"):
            OnnxBackend(str(tmp_path / "model.onnx"))

    def test_make_backend_dispatch(self):
        assert isinstance(make_backend("stub"), StubBackend)
