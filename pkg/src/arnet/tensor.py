"""Dense rank-4 tensors with define-by-run reverse-mode differentiation.

Feature maps are ``(n, c, h, w)`` numpy arrays wrapped in :class:`Tensor`.
Every primitive below records a closure computing the vector-Jacobian
product of its operands; :func:`backward` walks the recorded DAG once in
reverse topological order.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A value in the compute graph.

    Feature maps are rank 4; parameters (biases, batchnorm affine terms)
    may be rank 1. ``grad`` is allocated lazily on the first backward pass.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self, retain_graph: bool = False):
        backward(self, retain_graph=retain_graph)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar for the handful of places it reads better
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)


def tensor(data, requires_grad: bool = False, dtype=np.float64) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


def _result(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = vjp
    return out


def _check4(x: Tensor, what: str):
    if x.data.ndim != 4:
        raise ShapeError(f"{what}: expected rank-4 (n, c, h, w) tensor, got shape {x.shape}")


def backward(loss: Tensor, retain_graph: bool = False):
    """Populate ``.grad`` of every ``requires_grad`` leaf reachable from ``loss``.

    ``loss`` must be a single-element tensor on a recorded graph. The graph is
    released afterwards unless ``retain_graph`` is set.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must have exactly one element, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("backward: loss is detached from any graph (requires_grad=False)")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.array(g, dtype=node.data.dtype, copy=True)
            else:
                node.grad += g
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        if not retain_graph:
            node._parents = ()
            node._backward = None


# ---------------------------------------------------------------------------
# convolution

def _pad(x: np.ndarray, p: int, mode: str) -> np.ndarray:
    if p == 0:
        return x
    width = ((0, 0), (0, 0), (p, p), (p, p))
    if mode == "zeros":
        return np.pad(x, width)
    if mode == "replicate":
        return np.pad(x, width, mode="edge")
    raise ValueError(f"unknown padding mode {mode!r} (expected 'zeros' or 'replicate')")


def _unpad(gp: np.ndarray, p: int, mode: str) -> np.ndarray:
    """Adjoint of :func:`_pad`."""
    if p == 0:
        return gp
    if mode == "zeros":
        return gp[:, :, p:-p, p:-p]
    g = gp[:, :, p:-p, :].copy()
    g[:, :, 0, :] += gp[:, :, :p, :].sum(axis=2)
    g[:, :, -1, :] += gp[:, :, -p:, :].sum(axis=2)
    out = g[:, :, :, p:-p].copy()
    out[:, :, :, 0] += g[:, :, :, :p].sum(axis=3)
    out[:, :, :, -1] += g[:, :, :, -p:].sum(axis=3)
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0, padding_mode: str = "zeros", dilation: int = 1,
           groups: int = 1) -> Tensor:
    """2-D cross-correlation over ``(n, c, h, w)`` with grouped channels."""
    _check4(x, "conv2d input")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d: weight must be (out_c, in_c/groups, kh, kw), got {weight.shape}")
    n, c, h, w = x.shape
    oc, cg, kh, kw = weight.shape
    if c % groups:
        raise ShapeError(f"conv2d: in_channels={c} not divisible by groups={groups}")
    if oc % groups:
        raise ShapeError(f"conv2d: out_channels={oc} not divisible by groups={groups}")
    if cg != c // groups:
        raise ShapeError(f"conv2d: weight in_channels dimension is {cg}, expected in_c/groups = {c // groups}")
    if bias is not None and bias.shape != (oc,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match out_channels={oc}")
    hp, wp = h + 2 * padding, w + 2 * padding
    ekh, ekw = dilation * (kh - 1) + 1, dilation * (kw - 1) + 1
    if hp < ekh or wp < ekw:
        raise ShapeError(f"conv2d: padded input {hp}x{wp} smaller than dilated kernel {ekh}x{ekw}; zero-size output")
    oh = (hp - ekh) // stride + 1
    ow = (wp - ekw) // stride + 1
    og = oc // groups
    L = oh * ow
    xd = x.data
    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0
    if pointwise:
        cols = xd.reshape(n, c, L)
    else:
        xp = np.ascontiguousarray(_pad(xd, padding, padding_mode))
        cols = kernels.im2col(xp, kh, kw, stride, dilation, oh, ow)
    K = cg * kh * kw
    colsg = cols.reshape(n, groups, K, L)
    wg = weight.data.reshape(groups, og, K)
    out = np.matmul(wg, colsg).reshape(n, oc, oh, ow)
    if bias is not None:
        out += bias.data.reshape(1, oc, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g):
        gg = g.reshape(n, groups, og, L)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.matmul(gg, colsg.transpose(0, 1, 3, 2)).sum(axis=0).reshape(weight.shape)
        if x.requires_grad:
            gcols = np.matmul(wg.transpose(0, 2, 1), gg).reshape(n, c * kh * kw, L)
            if pointwise:
                gx = gcols.reshape(n, c, h, w)
            else:
                gxp = kernels.col2im(np.ascontiguousarray(gcols), c, hp, wp, kh, kw,
                                     stride, dilation, oh, ow)
                gx = _unpad(gxp, padding, padding_mode)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _result(out, parents, vjp)


# ---------------------------------------------------------------------------
# normalization and activations

def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, training: bool, momentum: float = 0.1,
                eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics normalize the input and the running
    buffers are updated in place (unbiased variance, as is conventional).
    """
    _check4(x, "batchnorm2d input")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: gamma/beta shapes {gamma.shape}/{beta.shape} do not match channels={c}")
    xd = x.data
    shp = (1, c, 1, 1)
    if training:
        m = n * h * w
        if m < 2:
            raise ShapeError("batchnorm2d: training mode needs n*h*w >= 2 values per channel")
        mean = xd.mean(axis=(0, 2, 3))
        xc = xd - mean.reshape(shp)
        var = (xc * xc).mean(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (m / (m - 1))
    else:
        mean = running_mean.astype(xd.dtype)
        var = running_var.astype(xd.dtype)
        xc = xd - mean.reshape(shp)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv.reshape(shp)
    out = xhat * gamma.data.reshape(shp) + beta.data.reshape(shp)

    def vjp(g):
        gg = gb = gx = None
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=(0, 2, 3))
        if beta.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(shp)
            if training:
                mg = gxhat.mean(axis=(0, 2, 3), keepdims=True)
                mgx = (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                gx = (gxhat - mg - xhat * mgx) * inv.reshape(shp)
            else:
                gx = gxhat * inv.reshape(shp)
        return gx, gg, gb

    return _result(out, (x, gamma, beta), vjp)


_activation_log: Optional[list] = None


@contextlib.contextmanager
def record_activation_patterns(log: list):
    """Append every ReLU sign pattern computed inside the block to ``log``.

    Finite-difference checks use this to tell when a perturbation crossed a
    kink of the piecewise-linear activation.
    """
    global _activation_log
    prev = _activation_log
    _activation_log = log
    try:
        yield log
    finally:
        _activation_log = prev


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _activation_log is not None:
        _activation_log.append(np.packbits(mask))
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)
    return _result(out, (x,), lambda g: (g * mask,))


def _sigmoid(a: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _result(s, (x,), lambda g: (g * s * (1 - s),))


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax across axis 1, independently at every (n, h, w) site."""
    _check4(x, "softmax_channels")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _result(s, (x,), vjp)


def sqrt(x: Tensor, eps: float = 0.0) -> Tensor:
    """``sqrt(x + eps)``; ``eps`` keeps the derivative finite at zero."""
    r = np.sqrt(x.data + eps)
    return _result(r, (x,), lambda g: (g * 0.5 / r,))


# ---------------------------------------------------------------------------
# resampling

def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Row-stochastic linear interpolation matrix, half-pixel centers, clamped edges."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    A = np.zeros((n_out, n_in), dtype=dtype)
    rows = np.arange(n_out)
    np.add.at(A, (rows, i0), 1 - frac)
    np.add.at(A, (rows, i1), frac)
    return A


def resize_bilinear(x: Tensor, size) -> Tensor:
    """Bilinear resize of the spatial dims to ``size = (h, w)``."""
    _check4(x, "resize_bilinear")
    n, c, h, w = x.shape
    H, W = int(size[0]), int(size[1])
    if (H, W) == (h, w):
        return x
    Ah = _interp_matrix(h, H, x.dtype)
    Aw = _interp_matrix(w, W, x.dtype)
    out = np.matmul(np.matmul(Ah, x.data), Aw.T)

    def vjp(g):
        return (np.matmul(np.matmul(Ah.T, g), Aw),)

    return _result(out, (x,), vjp)


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    if factor not in (2, 4, 8):
        raise ValueError(f"upsample_bilinear: factor must be 2, 4 or 8, got {factor}")
    _check4(x, "upsample_bilinear")
    return resize_bilinear(x, (x.shape[2] * factor, x.shape[3] * factor))


def resize_array(a: np.ndarray, size) -> np.ndarray:
    """Bilinear resize of a plain ``(..., h, w)`` array (no graph)."""
    h, w = a.shape[-2:]
    if (h, w) == tuple(size):
        return a
    Ah = _interp_matrix(h, size[0], np.float64)
    Aw = _interp_matrix(w, size[1], np.float64)
    return np.matmul(np.matmul(Ah, a), Aw.T)


# ---------------------------------------------------------------------------
# structural ops

def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ShapeError("concat_channels: empty list")
    for t in xs:
        _check4(t, "concat_channels operand")
    ref = xs[0].shape
    for i, t in enumerate(xs[1:], 1):
        for axis, name in ((0, "batch"), (2, "height"), (3, "width")):
            if t.shape[axis] != ref[axis]:
                raise ShapeError(f"concat_channels: operand {i} {name}={t.shape[axis]} differs from operand 0 {name}={ref[axis]}")
    out = np.concatenate([t.data for t in xs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def vjp(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return _result(out, tuple(xs), vjp)


def _slice_channels(x: Tensor, lo: int, hi: int) -> Tensor:
    out = x.data[:, lo:hi].copy()

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[:, lo:hi] = g
        return (gx,)

    return _result(out, (x,), vjp)


def split_channels(x: Tensor, parts: int) -> list[Tensor]:
    _check4(x, "split_channels")
    c = x.shape[1]
    if parts < 1 or c % parts:
        raise ShapeError(f"split_channels: channels={c} not divisible by parts={parts}")
    step = c // parts
    return [_slice_channels(x, i * step, (i + 1) * step) for i in range(parts)]


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (a, b) in enumerate(zip(g.shape, shape)) if b == 1 and a != 1)
    return g.sum(axis=axes, keepdims=True)


def _broadcast_shape(a: Tensor, b: Tensor, what: str):
    sa, sb = a.shape, b.shape
    if sa == sb:
        return sa
    if len(sa) != 4 or len(sb) != 4:
        raise ShapeError(f"{what}: incompatible shapes {sa} and {sb}")
    out = []
    for i, (x, y) in enumerate(zip(sa, sb)):
        if x == y or y == 1:
            out.append(x)
        elif x == 1:
            out.append(y)
        else:
            raise ShapeError(f"{what}: incompatible shapes {sa} and {sb} (axis {i}: {x} vs {y})")
    # only the batch axis is never broadcast
    if sa[0] != sb[0]:
        raise ShapeError(f"{what}: batch sizes differ ({sa[0]} vs {sb[0]})")
    return tuple(out)


def add(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise sum; a 1-channel or 1x1-spatial operand broadcasts."""
    _broadcast_shape(x, y, "add")
    out = x.data + y.data
    return _result(out, (x, y), lambda g: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)))


def mul(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise product; a 1-channel or 1x1-spatial operand broadcasts."""
    _broadcast_shape(x, y, "mul")
    out = x.data * y.data

    def vjp(g):
        return _unbroadcast(g * y.data, x.shape), _unbroadcast(g * x.data, y.shape)

    return _result(out, (x, y), vjp)


def scale(x: Tensor, k: float) -> Tensor:
    return _result(x.data * k, (x,), lambda g: (g * k,))


def global_avg_pool(x: Tensor) -> Tensor:
    _check4(x, "global_avg_pool")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return _result(out, (x,), lambda g: (np.broadcast_to(g / (h * w), x.shape).copy(),))


def sum_all(x: Tensor) -> Tensor:
    """Sum of every element as a ``(1, 1, 1, 1)`` scalar."""
    out = np.array(x.data.sum(), dtype=x.dtype).reshape(1, 1, 1, 1)
    return _result(out, (x,), lambda g: (np.full_like(x.data, g.reshape(()).item()),))


def add_n(xs: Sequence[Tensor]) -> Tensor:
    out = xs[0]
    for t in xs[1:]:
        out = add(out, t)
    return out


def channel_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Transposed (channel x channel) scaled dot-product attention.

    ``A = softmax_j(q_i . k_j / sqrt(h*w))`` over flattened spatial vectors,
    output ``A @ v``. Cost is linear in the pixel count.
    """
    for t, nm in ((q, "q"), (k, "k"), (v, "v")):
        _check4(t, f"channel_attention {nm}")
    if not (q.shape == k.shape == v.shape):
        raise ShapeError(f"channel_attention: q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    n, c, h, w = q.shape
    L = h * w
    s = 1.0 / math.sqrt(L)
    Q = q.data.reshape(n, c, L)
    K = k.data.reshape(n, c, L)
    V = v.data.reshape(n, c, L)
    logits = np.matmul(Q, K.transpose(0, 2, 1)) * s
    logits -= logits.max(axis=2, keepdims=True)
    A = np.exp(logits)
    A /= A.sum(axis=2, keepdims=True)
    out = np.matmul(A, V).reshape(n, c, h, w)

    def vjp(g):
        G = g.reshape(n, c, L)
        gA = np.matmul(G, V.transpose(0, 2, 1))
        gV = np.matmul(A.transpose(0, 2, 1), G)
        gl = A * (gA - (gA * A).sum(axis=2, keepdims=True)) * s
        gQ = np.matmul(gl, K)
        gK = np.matmul(gl.transpose(0, 2, 1), Q)
        return gQ.reshape(q.shape), gK.reshape(k.shape), gV.reshape(v.shape)

    return _result(out, (q, k, v), vjp)


# ---------------------------------------------------------------------------
# losses (scalar outputs, shape (1, 1, 1, 1))

def _check_binary(g: np.ndarray, what: str):
    if not np.all((g == 0) | (g == 1)):
        raise ValueError(f"{what}: ground truth must be binary (values in {{0, 1}})")


def _check_same(p: Tensor, g: np.ndarray, what: str):
    if p.shape != g.shape:
        raise ShapeError(f"{what}: prediction shape {p.shape} != ground-truth shape {g.shape}")


def _scalar(v, dtype) -> np.ndarray:
    return np.array(v, dtype=dtype).reshape(1, 1, 1, 1)


def bce_with_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against a binary map."""
    target = np.asarray(target, dtype=logits.dtype)
    _check_same(logits, target, "bce_with_logits")
    _check_binary(target, "bce_with_logits")
    z = logits.data
    # -[g log s(z) + (1-g) log(1-s(z))] = max(z,0) - z g + log(1 + exp(-|z|))
    loss = np.maximum(z, 0) - z * target + np.log1p(np.exp(-np.abs(z)))
    m = z.size
    s = _sigmoid(z)

    def vjp(g):
        return ((s - target) * (g.reshape(()).item() / m),)

    return _result(_scalar(loss.mean(), z.dtype), (logits,), vjp)


def soft_iou_loss(logits: Tensor, target: np.ndarray, smooth: float = 1.0) -> Tensor:
    """``1 - (I + smooth) / (U + smooth)`` on sigmoid probabilities, per sample, batch-averaged."""
    target = np.asarray(target, dtype=logits.dtype)
    _check_same(logits, target, "soft_iou_loss")
    _check_binary(target, "soft_iou_loss")
    s = _sigmoid(logits.data)
    n = s.shape[0]
    ax = (1, 2, 3)
    inter = (s * target).sum(axis=ax)
    total = s.sum(axis=ax) + target.sum(axis=ax)
    union = total - inter
    per = 1 - (inter + smooth) / (union + smooth)

    def vjp(g):
        gs = g.reshape(()).item() / n
        # d/ds of -(I+e)/(U+e) with dI/ds = t, dU/ds = 1 - t
        num = inter + smooth
        den = union + smooth
        dI = -1.0 / den
        dU = num / den ** 2
        coeff_t = (dI - dU).reshape(n, 1, 1, 1)
        coeff_1 = dU.reshape(n, 1, 1, 1)
        gp = (coeff_t * target + coeff_1) * s * (1 - s) * gs
        return (gp,)

    return _result(_scalar(per.mean(), s.dtype), (logits,), vjp)


def dice_loss(prob: Tensor, target: np.ndarray, smooth: float = 1.0) -> Tensor:
    """``1 - (2 I + smooth) / (|b| + |g| + smooth)`` on probabilities, per sample, batch-averaged."""
    target = np.asarray(target, dtype=prob.dtype)
    _check_same(prob, target, "dice_loss")
    _check_binary(target, "dice_loss")
    b = prob.data
    n = b.shape[0]
    ax = (1, 2, 3)
    inter = (b * target).sum(axis=ax)
    den = b.sum(axis=ax) + target.sum(axis=ax) + smooth
    num = 2 * inter + smooth
    per = 1 - num / den

    def vjp(g):
        gs = g.reshape(()).item() / n
        a = (-2.0 / den).reshape(n, 1, 1, 1)
        c = (num / den ** 2).reshape(n, 1, 1, 1)
        return ((a * target + c) * gs,)

    return _result(_scalar(per.mean(), b.dtype), (prob,), vjp)
