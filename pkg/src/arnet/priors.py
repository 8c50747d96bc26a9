"""Region (localization map R) and boundary (prior B) extraction."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .backbone import FeaturePyramid
from .nn import Conv2d, ConvBlock, Module
from .tensor import Tensor

SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
SOBEL_Y = np.array([[1, 2, 1], [0, 0, 0], [-1, -2, -1]], dtype=np.float64)
SOBEL_EPS = 1e-12


def sobel_magnitude(x: Tensor, eps: float = SOBEL_EPS) -> Tensor:
    """Per-channel gradient magnitude ``sqrt(gx^2 + gy^2 + eps)`` with replicate padding."""
    n, c, h, w = x.shape
    if h < 3 or w < 3:
        raise T.ShapeError(f"sobel_magnitude needs h, w >= 3, got {h}x{w}")
    kx = Tensor(np.broadcast_to(SOBEL_X, (c, 1, 3, 3)).astype(x.dtype))
    ky = Tensor(np.broadcast_to(SOBEL_Y, (c, 1, 3, 3)).astype(x.dtype))
    gx = T.conv2d(x, kx, padding=1, padding_mode="replicate", groups=c)
    gy = T.conv2d(x, ky, padding=1, padding_mode="replicate", groups=c)
    return T.sqrt(T.add(T.mul(gx, gx), T.mul(gy, gy)), eps)


class RegionExtraction(Module):
    """Top-down cascade X4 -> X34 -> X234 -> fused, projected to a 1-channel sigmoid map."""

    def __init__(self, rng, channels: int = 64, dtype=np.float64):
        super().__init__()
        c = channels
        self.reduce = [ConvBlock(c, c, 1, rng, dtype=dtype) for _ in range(4)]
        self.fuse34 = ConvBlock(2 * c, c, 3, rng, dtype=dtype)
        self.fuse234 = ConvBlock(2 * c, c, 3, rng, dtype=dtype)
        self.fuse1234 = ConvBlock(2 * c, c, 3, rng, dtype=dtype)
        self.proj = Conv2d(c, 1, 1, rng, dtype=dtype)

    def forward(self, p: FeaturePyramid) -> Tensor:
        r1, r2, r3, r4 = (red(x) for red, x in zip(self.reduce, p.levels()))
        x34 = self.fuse34(T.concat_channels([T.upsample_bilinear(r4, 2), r3]))
        x234 = self.fuse234(T.concat_channels([T.upsample_bilinear(x34, 2), r2]))
        fused = self.fuse1234(T.concat_channels([T.upsample_bilinear(x234, 2), r1]))
        return T.sigmoid(self.proj(fused))


class BoundaryExtraction(Module):
    def __init__(self, rng, channels: int = 64, dtype=np.float64):
        super().__init__()
        c = channels
        self.block1 = ConvBlock(2 * c, c, 3, rng, dtype=dtype)
        self.block2 = ConvBlock(c, c, 3, rng, dtype=dtype)
        self.proj = Conv2d(c, 1, 1, rng, dtype=dtype)

    def forward(self, p: FeaturePyramid) -> Tensor:
        edges = sobel_magnitude(p.X1)
        x = T.concat_channels([edges, T.upsample_bilinear(p.X4, 8)])
        return T.sigmoid(self.proj(self.block2(self.block1(x))))


def _shift_stack(m: np.ndarray) -> np.ndarray:
    """All nine 3x3-neighbourhood shifts of ``m`` under replicate edges."""
    p = np.pad(m, [(0, 0)] * (m.ndim - 2) + [(1, 1), (1, 1)], mode="edge")
    h, w = m.shape[-2:]
    return np.stack([p[..., i:i + h, j:j + w] for i in range(3) for j in range(3)])


def dilate3(m: np.ndarray) -> np.ndarray:
    return _shift_stack(m).max(axis=0)


def erode3(m: np.ndarray) -> np.ndarray:
    return _shift_stack(m).min(axis=0)


def boundary_gt(mask: np.ndarray) -> np.ndarray:
    """Morphological gradient (3x3 dilation minus 3x3 erosion) of a binary mask."""
    mask = np.asarray(mask)
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("boundary_gt: mask must be binary (values in {0, 1})")
    return (dilate3(mask) - erode3(mask)).astype(mask.dtype if mask.dtype.kind == "f" else np.float64)
