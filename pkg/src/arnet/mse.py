"""Multi-scale enhancement: three receptive-field branches and a residual fuse."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import ConvBlock, Module
from .tensor import ShapeError, Tensor

CHANNELS = 64
DILATION = 3


class MSE(Module):
    def __init__(self, rng, channels: int = CHANNELS, dtype=np.float64):
        super().__init__()
        c = channels
        self.channels = c
        self.branch1 = [ConvBlock(c, c, 5, rng, dtype=dtype), ConvBlock(c, c, 5, rng, dtype=dtype)]
        self.branch2 = [ConvBlock(c, c, 3, rng, dtype=dtype), ConvBlock(c, c, 3, rng, dtype=dtype)]
        self.branch3 = ConvBlock(c, c, 3, rng, dilation=DILATION, dtype=dtype)
        self.fuse = ConvBlock(3 * c, c, 3, rng, dtype=dtype)

    def branches(self, f: Tensor) -> list[Tensor]:
        b1 = self.branch1[1](self.branch1[0](f))
        b2 = self.branch2[1](self.branch2[0](f))
        b3 = self.branch3(f)
        return [b1, b2, b3]

    def forward(self, f: Tensor) -> Tensor:
        if f.shape[1] != self.channels:
            raise ShapeError(f"MSE: expected {self.channels} channels, got {f.shape[1]}")
        return T.relu(T.add(f, self.fuse(T.concat_channels(self.branches(f)))))
