"""Central finite-difference gradient checking in double precision."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

# |analytic - numeric| is divided by max(|analytic|, |numeric|, ABS_FLOOR); the
# floor keeps round-off in near-zero components from reading as relative error.
ABS_FLOOR = 1e-2
STEP = 1e-6


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    worst: tuple
    kink_skipped: int = 0

    def ok(self, tol: float = 1e-5) -> bool:
        return self.max_rel_error < tol and self.checked > 0


def projection_loss(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``sum(out * weights)``; random weights exercise every output element."""
    return T.sum_all(T.mul(out, Tensor(weights)))


def relative_error(a, n, floor: float = ABS_FLOOR):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def _same_patterns(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _eval(fn, log: list) -> float:
    log.clear()
    with T.record_activation_patterns(log):
        return fn().item()


def check(fn: Callable[[], Tensor], wrt: Sequence[Tensor], rng: np.random.Generator = None,
          max_per_tensor: int | None = 24, step: float = STEP, floor: float = ABS_FLOOR,
          steps: Sequence[float] = None) -> GradCheckResult:
    """Compare backward() against central differences of ``fn``.

    ``fn`` must rebuild the graph from the current values of ``wrt`` and
    return a single-element tensor. At most ``max_per_tensor`` randomly
    chosen coordinates of each tensor are perturbed (``None`` = all).

    The ReLU sign pattern at ``x +/- h`` is compared with the one at ``x``. A
    difference means the secant spans a kink, so the step is shrunk through
    ``steps``; a coordinate that still straddles a kink at the smallest step
    has no two-sided derivative to compare and is replaced by another draw.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    steps = tuple(steps) if steps is not None else (step, step / 10)
    for t in wrt:
        t.grad = None
        t.requires_grad = True
    loss = fn()
    T.backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in wrt]
    worst = (0.0, -1, -1, 0.0, 0.0)
    checked = skipped = 0
    base: list = []
    scratch: list = []
    with T.no_grad():
        _eval(fn, base)
        for ti, t in enumerate(wrt):
            flat = t.data.reshape(-1)
            size = flat.size
            if max_per_tensor is None or size <= max_per_tensor:
                order = np.arange(size)
                want = size
            else:
                order = rng.permutation(size)
                want = max_per_tensor
            done = 0
            for i in order:
                if done >= want:
                    break
                orig = flat[i]
                num = None
                for h in steps:
                    flat[i] = orig + h
                    fp = _eval(fn, scratch)
                    smooth = _same_patterns(scratch, base)
                    flat[i] = orig - h
                    fm = _eval(fn, scratch)
                    smooth = smooth and _same_patterns(scratch, base)
                    flat[i] = orig
                    if smooth:
                        num = (fp - fm) / (2 * h)
                        break
                if num is None:
                    skipped += 1
                    continue
                a = analytic[ti].reshape(-1)[i]
                err = float(relative_error(a, num, floor))
                checked += 1
                done += 1
                if err > worst[0]:
                    worst = (err, ti, int(i), float(a), float(num))
    return GradCheckResult(worst[0], checked, worst[1:], skipped)
