"""Channel information interaction: cross-layer fusion, FAP, gating, HGA."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import Conv2d, ConvBlock, DwFFN, Module, SEBlock
from .tensor import ShapeError, Tensor

IN_CHANNELS = 64
FUSED_CHANNELS = 128
PARTS = 4
PART_CHANNELS = FUSED_CHANNELS // PARTS
OUT_CHANNELS = 64


def fap_block_names(parts: int = PARTS) -> list[str]:
    """Names of the fusion blocks the recursion instantiates, in evaluation order.

    ``c{m}_{k}`` is the chain fusion producing C_{m,k} (k >= 2) from level m;
    ``s{m}_{k}`` produces node k of level m (m >= 2).
    """
    names = []
    width = parts
    for m in range(2, parts + 1):
        prev = m - 1
        names += [f"c{prev}_{k}" for k in range(2, width + 1)]
        names += [f"s{m}_{k}" for k in range(1, width)]
        width -= 1
    return names


class FAP(Module):
    """Recursive pairwise fusion of the channel-split parts down to a single apex node.

    For level ``m-1`` with nodes ``S_1..S_L`` the chain is ``C_1 = S_1`` and
    ``C_k = F(C_{k-1}, S_k)``; level ``m`` has ``S'_k = F(C_k, F(C_k, S_{k+1}))``
    where the inner fusion is exactly ``C_{k+1}``. Every F is its own block
    unless ``shared`` is given (used only to probe symmetry).
    """

    def __init__(self, rng, channels: int = PART_CHANNELS, parts: int = PARTS, shared: ConvBlock = None,
                 dtype=np.float64):
        super().__init__()
        self.parts = parts
        self.channels = channels
        names = fap_block_names(parts)
        if shared is not None:
            self.blocks = {n: shared for n in names}
        else:
            self.blocks = {n: ConvBlock(2 * channels, channels, 3, rng, dtype=dtype) for n in names}
        self.trace: list[str] = []

    def fuse(self, name: str, a: Tensor, b: Tensor) -> Tensor:
        self.trace.append(name)
        return self.blocks[name](T.concat_channels([a, b]))

    def forward(self, parts: list[Tensor], keep_levels: bool = False):
        if len(parts) != self.parts:
            raise ShapeError(f"FAP expects {self.parts} parts, got {len(parts)}")
        for i, s in enumerate(parts):
            if s.shape[1] != self.channels:
                raise ShapeError(f"FAP part {i + 1} has {s.shape[1]} channels, expected {self.channels}")
        self.trace = []
        level = list(parts)
        levels = [level]
        m = 1
        while len(level) > 1:
            chain = [level[0]]
            for k in range(1, len(level)):
                chain.append(self.fuse(f"c{m}_{k + 1}", chain[-1], level[k]))
            level = [self.fuse(f"s{m + 1}_{k + 1}", chain[k], chain[k + 1]) for k in range(len(level) - 1)]
            levels.append(level)
            m += 1
        return (level[0], levels) if keep_levels else level[0]


class ChannelGate(Module):
    """Softmax channel weights from pooled statistics, applied then fused by a 3x3 unit."""

    def __init__(self, rng, channels: int = PART_CHANNELS, out_c: int = PART_CHANNELS, dtype=np.float64):
        super().__init__()
        self.logits = Conv2d(channels, channels, 1, rng, dtype=dtype)
        self.fuse = ConvBlock(channels, out_c, 3, rng, dtype=dtype)

    def weights(self, x: Tensor) -> Tensor:
        return T.softmax_channels(self.logits(T.global_avg_pool(x)))

    def forward(self, x: Tensor) -> Tensor:
        return self.fuse(T.mul(x, self.weights(x)))


class HGA(Module):
    """Boundary/region guided attention on the 32-channel enhanced features."""

    def __init__(self, rng, channels: int = PART_CHANNELS, out_c: int = OUT_CHANNELS, mode: str = "elementwise",
                 use_boundary: bool = True, use_region: bool = True, dtype=np.float64):
        super().__init__()
        if mode not in ("elementwise", "dot_attention"):
            raise ValueError(f"hga mode must be 'elementwise' or 'dot_attention', got {mode!r}")
        self.mode = mode
        self.channels = channels
        self.use_boundary, self.use_region = use_boundary, use_region
        self.qkv = Conv2d(channels, 6 * channels, 1, rng, dtype=dtype)
        self.qkv_dw = Conv2d(6 * channels, 6 * channels, 3, rng, groups=6 * channels, dtype=dtype)
        self.ffn_b = DwFFN(channels, rng, dtype=dtype)
        self.ffn_r = DwFFN(channels, rng, dtype=dtype)
        self.out = ConvBlock(channels, out_c, 3, rng, dtype=dtype)

    def _path(self, q, k, v, guide, ffn):
        qg = T.mul(q, guide)
        kg = T.mul(k, guide)
        if self.mode == "elementwise":
            mixed = T.mul(T.mul(qg, kg), v)
        else:
            mixed = T.channel_attention(qg, kg, v)
        return ffn(mixed)

    def forward(self, x: Tensor, B: Tensor = None, R: Tensor = None) -> Tensor:
        hw = x.shape[2:]
        q1, k1, v1, q2, k2, v2 = T.split_channels(self.qkv_dw(self.qkv(x)), 6)
        terms = [x]
        if self.use_boundary and B is not None:
            B = T.resize_bilinear(B, hw)
            assert B.shape[2:] == hw and B.shape[1] == 1
            terms.append(self._path(q1, k1, v1, B, self.ffn_b))
        if self.use_region and R is not None:
            R = T.resize_bilinear(R, hw)
            assert R.shape[2:] == hw and R.shape[1] == 1
            terms.append(self._path(q2, k2, v2, R, self.ffn_r))
        return self.out(T.add_n(terms[1:] + terms[:1]))


class CIIM(Module):
    """``fuse_adjacent -> split -> FAP -> gate -> residual -> HGA``.

    ``use_fap=False`` feeds the re-concatenated parts (128 ch) to the gate;
    ``se_instead_of_fap`` swaps FAP and the gate for a squeeze-excitation
    block followed by a 3x3 unit; ``use_hga=False`` ends with a 3x3 unit on
    the enhanced features.
    """

    def __init__(self, rng, use_fap: bool = True, use_hga: bool = True, se_instead_of_fap: bool = False,
                 hga_mode: str = "elementwise", use_boundary: bool = True, use_region: bool = True,
                 dtype=np.float64):
        super().__init__()
        self.use_fap = use_fap and not se_instead_of_fap
        self.use_hga = use_hga
        self.se_instead_of_fap = se_instead_of_fap
        self.fuse = ConvBlock(IN_CHANNELS, FUSED_CHANNELS, 1, rng, dtype=dtype)
        if se_instead_of_fap:
            self.se = SEBlock(FUSED_CHANNELS, rng, dtype=dtype)
            self.se_fuse = ConvBlock(FUSED_CHANNELS, PART_CHANNELS, 3, rng, dtype=dtype)
        elif self.use_fap:
            self.fap = FAP(rng, dtype=dtype)
            self.gate = ChannelGate(rng, dtype=dtype)
        else:
            self.gate = ChannelGate(rng, channels=FUSED_CHANNELS, out_c=PART_CHANNELS, dtype=dtype)
        self.residual = Conv2d(FUSED_CHANNELS, PART_CHANNELS, 1, rng, dtype=dtype)
        if use_hga:
            self.hga = HGA(rng, mode=hga_mode, use_boundary=use_boundary, use_region=use_region, dtype=dtype)
        else:
            self.out = ConvBlock(PART_CHANNELS, OUT_CHANNELS, 3, rng, dtype=dtype)
        self.state: dict = {}

    def fuse_adjacent(self, f_in: Tensor, f_in_prime: Tensor) -> Tensor:
        _, c, h, w = f_in.shape
        _, c2, H, W = f_in_prime.shape
        if c != IN_CHANNELS or c2 != IN_CHANNELS:
            raise ShapeError(f"CIIM inputs must have {IN_CHANNELS} channels, got {c} and {c2}")
        if (2 * h, 2 * w) != (H, W):
            raise ShapeError(f"CIIM scale mismatch: f_in {h}x{w} must be half of f_in' {H}x{W}")
        return self.fuse(T.add(T.upsample_bilinear(f_in, 2), f_in_prime))

    def forward(self, f_in: Tensor, f_in_prime: Tensor, B: Tensor = None, R: Tensor = None,
                keep_state: bool = False) -> Tensor:
        S = self.fuse_adjacent(f_in, f_in_prime)
        if self.se_instead_of_fap:
            So = self.se_fuse(self.se(S))
            parts = apex = None
        else:
            parts = T.split_channels(S, PARTS)
            apex = self.fap(parts) if self.use_fap else T.concat_channels(parts)
            So = self.gate(apex)
        So_prime = T.add(So, self.residual(S))
        f_out = self.hga(So_prime, B, R) if self.use_hga else self.out(So_prime)
        if keep_state:
            self.state = dict(S=S, S_split=parts, S41=apex, So=So, So_prime=So_prime, f_out=f_out)
        return f_out
