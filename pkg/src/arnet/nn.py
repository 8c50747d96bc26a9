"""Parameter containers and the reusable convolution units of the decoder."""

from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


class Module:
    """Minimal parameter container.

    Parameters are ``Tensor`` attributes with ``requires_grad``; buffers are
    numpy arrays registered through :meth:`register_buffer`. Children and
    lists of children are discovered from attributes in definition order, so
    names are stable across runs.
    """

    training = True

    def __init__(self):
        self._buffers: dict[str, np.ndarray] = {}

    def register_buffer(self, name: str, value: np.ndarray):
        self._buffers[name] = value

    def _children(self) -> Iterator[tuple[str, "Module"]]:
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield name, val
            elif isinstance(val, (list, tuple)) and val and all(isinstance(v, Module) for v in val):
                for i, v in enumerate(val):
                    yield f"{name}.{i}", v
            elif isinstance(val, dict) and val and all(isinstance(v, Module) for v in val.values()):
                for k, v in val.items():
                    yield f"{name}.{k}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        seen: set[int] = set()
        for name, p in self._named_params(prefix):
            if id(p) in seen:
                continue
            seen.add(id(p))
            yield name, p

    def _named_params(self, prefix):
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + name, val
        for name, child in self._children():
            yield from child._named_params(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.named_parameters()}
        out.update(dict(self.named_buffers()))
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True):
        own = {name: p for name, p in self.named_parameters()}
        bufs = dict(self.named_buffers())
        missing = [k for k in list(own) + list(bufs) if k not in state]
        unexpected = [k for k in state if k not in own and k not in bufs]
        if strict and (missing or unexpected):
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for k, p in own.items():
            if k in state:
                p.data[...] = np.asarray(state[k]).reshape(p.shape)
        for k, b in bufs.items():
            if k in state:
                b[...] = np.asarray(state[k]).reshape(b.shape)

    def train(self, mode: bool = True):
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float64) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def same_padding(kernel: int, dilation: int = 1) -> int:
    return dilation * (kernel - 1) // 2


class Conv2d(Module):
    """Plain convolution with bias (no normalization, no activation)."""

    def __init__(self, in_c: int, out_c: int, kernel: int = 1, rng=None, *, stride: int = 1,
                 dilation: int = 1, groups: int = 1, padding: Optional[int] = None,
                 padding_mode: str = "zeros", bias: bool = True, dtype=np.float64):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_c, self.out_c, self.kernel = in_c, out_c, kernel
        self.stride, self.dilation, self.groups = stride, dilation, groups
        self.padding = same_padding(kernel, dilation) if padding is None else padding
        self.padding_mode = padding_mode
        fan_in = (in_c // groups) * kernel * kernel
        self.weight = Tensor(kaiming_uniform(rng, (out_c, in_c // groups, kernel, kernel), fan_in, dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_c, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_c:
            raise ShapeError(f"{type(self).__name__}: expected {self.in_c} input channels, got {x.shape[1]}")
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding,
                        padding_mode=self.padding_mode, dilation=self.dilation, groups=self.groups)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float64):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float64))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float64))

    def forward(self, x: Tensor) -> Tensor:
        return T.batchnorm2d(x, self.gamma, self.beta, self._buffers["running_mean"],
                             self._buffers["running_var"], self.training, self.momentum, self.eps)


class ConvBlock(Module):
    """``conv -> batchnorm -> relu`` with size-preserving padding at stride 1."""

    def __init__(self, in_c: int, out_c: int, kernel: int = 3, rng=None, *, stride: int = 1,
                 dilation: int = 1, dtype=np.float64):
        super().__init__()
        self.conv = Conv2d(in_c, out_c, kernel, rng, stride=stride, dilation=dilation, dtype=dtype)
        self.bn = BatchNorm2d(out_c, dtype=dtype)

    @property
    def in_c(self):
        return self.conv.in_c

    @property
    def out_c(self):
        return self.conv.out_c

    def forward(self, x: Tensor) -> Tensor:
        return T.relu(self.bn(self.conv(x)))


class DwFFN(Module):
    """Depthwise-separable feed-forward: expand 1x1, depthwise 3x3, ReLU, project 1x1."""

    def __init__(self, channels: int, rng=None, expansion: int = 2, dtype=np.float64):
        super().__init__()
        hidden = channels * expansion
        self.channels = channels
        self.expand = Conv2d(channels, hidden, 1, rng, dtype=dtype)
        self.depthwise = Conv2d(hidden, hidden, 3, rng, groups=hidden, dtype=dtype)
        self.project = Conv2d(hidden, channels, 1, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ShapeError(f"DwFFN: expected {self.channels} channels, got {x.shape[1]}")
        return self.project(T.relu(self.depthwise(self.expand(x))))


def dwffn_param_count(c: int, r: int = 2) -> int:
    rc = r * c
    return c * rc + rc * 9 + rc * c + (rc + rc + c)


class PredictionHead(Module):
    """1x1 projection to one logit channel, resized bilinearly to the target size."""

    def __init__(self, in_c: int = 64, rng=None, dtype=np.float64):
        super().__init__()
        self.proj = Conv2d(in_c, 1, 1, rng, dtype=dtype)

    def forward(self, x: Tensor, target_hw) -> Tensor:
        return T.resize_bilinear(self.proj(x), target_hw)


class SEBlock(Module):
    """Squeeze-and-excitation channel reweighting."""

    def __init__(self, channels: int, rng=None, reduction: int = 16, dtype=np.float64):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.fc1 = Conv2d(channels, hidden, 1, rng, dtype=dtype)
        self.fc2 = Conv2d(hidden, channels, 1, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        w = T.sigmoid(self.fc2(T.relu(self.fc1(T.global_avg_pool(x)))))
        return T.mul(x, w)
