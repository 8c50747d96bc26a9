"""Four-stage convolutional stand-in for the transformer encoder.

Any module returning a :class:`FeaturePyramid` with the stride/channel
contract below can replace it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import ConvBlock, Module
from .tensor import ShapeError, Tensor

PYRAMID_CHANNELS = 64
STRIDES = (4, 8, 16, 32)


@dataclass
class FeaturePyramid:
    X1: Tensor
    X2: Tensor
    X3: Tensor
    X4: Tensor

    def levels(self):
        return (self.X1, self.X2, self.X3, self.X4)

    def validate(self):
        n, _, h1, w1 = self.X1.shape
        for i, x in enumerate(self.levels()):
            scale = 2 ** i
            if x.shape[1] != PYRAMID_CHANNELS:
                raise ShapeError(f"pyramid level X{i + 1}: {x.shape[1]} channels, expected {PYRAMID_CHANNELS}")
            if x.shape[0] != n or x.shape[2] * scale != h1 or x.shape[3] * scale != w1:
                raise ShapeError(f"pyramid level X{i + 1}: shape {x.shape} breaks the stride ladder from X1 {self.X1.shape}")


def check_input_size(h: int, w: int):
    if h < 32 or w < 32 or h % 32 or w % 32:
        raise ShapeError(f"input size {h}x{w} must be a multiple of 32 (>= 32); resize the image first")


class BackboneStub(Module):
    """Stem of two stride-2 units, three stride-2 stages, 1x1 reductions to 64 channels."""

    widths = (32, 64, 96, 128)

    def __init__(self, rng=None, dtype=np.float64):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        w1, w2, w3, w4 = self.widths
        self.stem1 = ConvBlock(3, w1, 3, rng, stride=2, dtype=dtype)
        self.stem2 = ConvBlock(w1, w1, 3, rng, stride=2, dtype=dtype)
        self.stage2 = ConvBlock(w1, w2, 3, rng, stride=2, dtype=dtype)
        self.stage3 = ConvBlock(w2, w3, 3, rng, stride=2, dtype=dtype)
        self.stage4 = ConvBlock(w3, w4, 3, rng, stride=2, dtype=dtype)
        self.reduce = [ConvBlock(c, PYRAMID_CHANNELS, 1, rng, dtype=dtype) for c in self.widths]

    def forward(self, image: Tensor) -> FeaturePyramid:
        if image.data.ndim != 4 or image.shape[1] != 3:
            raise ShapeError(f"backbone expects an (n, 3, H, W) image, got {image.shape}")
        check_input_size(image.shape[2], image.shape[3])
        c1 = self.stem2(self.stem1(image))
        c2 = self.stage2(c1)
        c3 = self.stage3(c2)
        c4 = self.stage4(c3)
        return FeaturePyramid(*(r(c) for r, c in zip(self.reduce, (c1, c2, c3, c4))))

    extract = forward
