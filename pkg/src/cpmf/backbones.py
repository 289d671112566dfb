"""Image feature backbones behind a common contract.

A backend maps an (H, W, 3) image in [0, 1] to a stack of feature maps
(one per block) that the extraction layer upsamples and concatenates to a
single (H, W, D) map. Two realizations ship here: an ONNX runtime wrapper
for real pretrained networks, and a deterministic stub (a fixed-seed stack
of small convolutions) so the full pipeline runs without model weights.
"""

from abc import ABC, abstractmethod

import numpy as np

# Standard ImageNet channel statistics.
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

STUB_DIM = 448
_STUB_WEIGHT_SEED = 20230117


def bilinear_resize(arr, out_h, out_w):
    """Resize (H, W, C) or (H, W) arrays with bilinear interpolation
    (half-pixel centers, edges clamped)."""
    arr = np.asarray(arr, dtype=np.float64)
    in_h, in_w = arr.shape[:2]
    if (in_h, in_w) == (out_h, out_w):
        return arr.copy()

    def axis_coords(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = src - lo
        return lo, hi, frac

    y0, y1, fy = axis_coords(out_h, in_h)
    x0, x1, fx = axis_coords(out_w, in_w)
    fy = fy.reshape(-1, *([1] * (arr.ndim - 1)))
    rows = arr[y0] * (1.0 - fy) + arr[y1] * fy
    fx = fx.reshape(1, -1, *([1] * (arr.ndim - 2)))
    return rows[:, x0] * (1.0 - fx) + rows[:, x1] * fx


class FeatureBackend(ABC):
    """Contract: deterministic image -> list of per-block feature maps."""

    dim: int
    channel_mean: tuple = IMAGENET_MEAN
    channel_std: tuple = IMAGENET_STD
    expected_size: tuple = None  # (H, W) or None for size-agnostic backends

    @abstractmethod
    def infer(self, normalized_image):
        """Run inference on a channel-normalized (H, W, 3) image and return a
        list of (h_i, w_i, c_i) feature maps whose channel counts sum to dim."""


def _conv2d(x, kernels, bias):
    """'Same' convolution with edge padding (keeps constant inputs constant).

    Computed as one matmul per kernel tap over shifted views, which keeps
    the work in large GEMMs without materializing an im2col buffer.
    """
    kh, kw, cin, cout = kernels.shape
    pad_h, pad_w = kh // 2, kw // 2
    xp = np.pad(x, ((pad_h, pad_h), (pad_w, pad_w), (0, 0)), mode="edge")
    h, w = x.shape[:2]
    out = np.tile(bias, (h * w, 1))
    for dy in range(kh):
        for dx in range(kw):
            shifted = xp[dy : dy + h, dx : dx + w].reshape(h * w, cin)
            out += shifted @ kernels[dy, dx]
    return out.reshape(h, w, cout)


def _avg_pool2(x):
    h, w = x.shape[:2]
    if h % 2 or w % 2:
        x = np.pad(x, ((0, h % 2), (0, w % 2), (0, 0)), mode="edge")
        h, w = x.shape[:2]
    return x.reshape(h // 2, 2, w // 2, 2, -1).mean(axis=(1, 3))


class StubBackend(FeatureBackend):
    """Fixed-seed three-block convolutional stub with channel dims 64/128/256.

    Deterministic, size-agnostic, and constant-preserving: a constant input
    image yields spatially constant feature maps.
    """

    dim = STUB_DIM
    expected_size = None
    _block_channels = (64, 128, 256)

    def __init__(self):
        rng = np.random.default_rng(_STUB_WEIGHT_SEED)
        self._layers = []
        cin = 3
        for cout in self._block_channels:
            scale = 1.0 / np.sqrt(9 * cin)
            kernels = rng.normal(0.0, scale, size=(3, 3, cin, cout))
            bias = rng.normal(0.0, 0.1, size=cout)
            self._layers.append((kernels, bias))
            cin = cout

    def infer(self, normalized_image):
        maps = []
        x = np.asarray(normalized_image, dtype=np.float64)
        for kernels, bias in self._layers:
            x = np.tanh(_conv2d(x, kernels, bias))
            maps.append(x)
            x = _avg_pool2(x)
        return maps


class OnnxBackend(FeatureBackend):
    """Runs a serialized network with one NCHW 1x3xHxW image input and one
    output per feature block.

    ``session`` may be any object with the onnxruntime InferenceSession
    surface (get_inputs/run); by default one is created from ``path``.
    """

    def __init__(self, path, dim=448, session=None):
        if session is None:
            try:
                import onnxruntime
            except ImportError as exc:
                raise ImportError(
                    "the onnx backbone requires the 'onnxruntime' package; "
                    "install cpmf[onnx] or pass backbone='stub'"
                ) from exc
            session = onnxruntime.InferenceSession(
                path, providers=["CPUExecutionProvider"]
            )
        self._session = session
        self.dim = dim
        inputs = session.get_inputs()
        if len(inputs) != 1:
            raise ValueError(f"backbone model must have exactly one input, got {len(inputs)}")
        self._input_name = inputs[0].name
        shape = inputs[0].shape
        if len(shape) != 4:
            raise ValueError(f"backbone input must be NCHW, got shape {shape}")
        h, w = shape[2], shape[3]
        self.expected_size = (h, w) if isinstance(h, int) and isinstance(w, int) else None

    def infer(self, normalized_image):
        x = normalized_image.transpose(2, 0, 1)[None].astype(np.float32)
        outputs = self._session.run(None, {self._input_name: x})
        maps = []
        for out in outputs:
            out = np.asarray(out, dtype=np.float64)
            if out.ndim != 4 or out.shape[0] != 1:
                raise ValueError(f"backbone outputs must be 1xCxHxW, got {out.shape}")
            maps.append(out[0].transpose(1, 2, 0))
        return maps


def make_backend(name_or_path, dim=STUB_DIM):
    """Resolve the config value: 'stub' or a path to an ONNX model file."""
    if name_or_path == "stub":
        return StubBackend()
    return OnnxBackend(name_or_path, dim=dim)
