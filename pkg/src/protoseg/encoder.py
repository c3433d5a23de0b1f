"""Feature encoder: a small trainable convolution stack.

Three 3x3 convolutions take a gray image to a D-channel map at 1/4 spatial
resolution (stride 2 on the first two layers, ReLU after the first two).
It stands in for a deep pretrained backbone at desk scale; precomputed
features can be swapped in through the DSPF file functions below.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from . import numerics as nx
from .errors import (
    FeatureFileFormatError,
    FeatureFileNonFiniteError,
    FeatureFileTruncatedError,
    ShapeMismatchError,
)

DSPF_MAGIC = b"DSPF"

# (out channels placeholder resolved by feature_dim), kernel, stride, pad
_LAYERS = ((16, 3, 2, 1), (32, 3, 2, 1), (None, 3, 1, 1))


class Encoder:
    """Trainable image-to-feature map with deterministic seeded init.

    Weights and biases draw from uniform[-s, s] with s = sqrt(1/fan_in),
    layer by layer, so a (feature_dim, seed) pair pins every parameter.
    """

    def __init__(self, feature_dim: int = 32, seed: int = 0, params: nx.ParamStore | None = None):
        if feature_dim < 2:
            raise ShapeMismatchError(f"feature_dim must be >= 2, got {feature_dim}")
        self.feature_dim = int(feature_dim)
        self.params = params if params is not None else nx.ParamStore()
        rng = np.random.default_rng(seed)
        self._layers = []
        cin = 1
        for i, (cout, k, stride, pad) in enumerate(_LAYERS, start=1):
            cout = self.feature_dim if cout is None else cout
            s = np.sqrt(1.0 / (cin * k * k))
            w = self.params.add(
                f"encoder.conv{i}.w", rng.uniform(-s, s, size=(cout, cin, k, k))
            )
            b = self.params.add(f"encoder.conv{i}.b", rng.uniform(-s, s, size=cout))
            self._layers.append((w, b, stride, pad))
            cin = cout

    def encode(self, image) -> nx.Tensor:
        """Map an (H,W) gray image in [0,1] to a (D, H/4, W/4) feature tensor."""
        img = image.data if isinstance(image, nx.Tensor) else np.asarray(image, dtype=np.float64)
        if img.ndim != 2:
            raise ShapeMismatchError(f"expected a 2-D gray image, got shape {img.shape}")
        h, w = img.shape
        if h % 4 or w % 4:
            raise ShapeMismatchError(f"image extents must be multiples of 4, got {(h, w)}")
        if h < 8 or w < 8:
            raise ShapeMismatchError(f"image too small for two stride-2 stages: {(h, w)}")
        if img.min() < 0.0 or img.max() > 1.0:
            raise ValueError(
                f"image values must lie in [0,1], got [{img.min():g}, {img.max():g}]"
            )
        x = nx.Tensor(img[None, :, :])
        for i, (w_t, b_t, stride, pad) in enumerate(self._layers):
            x = nx.conv2d(x, w_t, b_t, stride=stride, pad=pad)
            if i < len(self._layers) - 1:
                x = nx.relu(x)
        return x


def save_features(path, features) -> None:
    """Write a (D,H,W) feature map in the DSPF layout (bit-exact round trip)."""
    arr = features.data if isinstance(features, nx.Tensor) else np.asarray(features)
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    if arr.ndim != 3:
        raise ShapeMismatchError(f"feature maps are 3-D (D,H,W), got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise FeatureFileNonFiniteError("refusing to write non-finite features")
    d, h, w = arr.shape
    header = DSPF_MAGIC + struct.pack("<III", d, h, w)
    Path(path).write_bytes(header + arr.astype("<f8").tobytes(order="C"))


def load_features(path) -> np.ndarray:
    """Read a DSPF feature file back into a (D,H,W) float64 array."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != DSPF_MAGIC:
        raise FeatureFileFormatError(f"{path}: not a DSPF feature file")
    d, h, w = struct.unpack("<III", raw[4:16])
    if d < 1 or h < 1 or w < 1:
        raise FeatureFileFormatError(f"{path}: degenerate extents {(d, h, w)}")
    need = d * h * w * 8
    have = len(raw) - 16
    if have < need:
        raise FeatureFileTruncatedError(
            f"{path}: header promises {need} payload bytes, file has {have}"
        )
    if have > need:
        raise FeatureFileFormatError(f"{path}: {have - need} trailing bytes")
    arr = np.frombuffer(raw, dtype="<f8", offset=16).reshape(d, h, w)
    if not np.all(np.isfinite(arr)):
        raise FeatureFileNonFiniteError(f"{path}: payload contains NaN or Inf")
    return arr.astype(np.float64)
