"""Release gate: gradient, shape-contract, Sobel and metric-oracle suites.

Each suite is a list of named checks; a check returns ``(ok, detail)``.
The gradient cases are also parametrized directly by the test suite.
"""

from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import gradcheck, metrics, oracles, priors
from . import tensor as T
from .backbone import STRIDES, BackboneStub
from .ciim import CIIM, FAP, HGA, ChannelGate, fap_block_names
from .mse import MSE
from .network import ARNet, ModelConfig, total_loss
from .nn import ConvBlock, DwFFN
from .priors import BoundaryExtraction, RegionExtraction
from .tensor import Tensor

GRAD_TOL = 1e-5


@dataclass
class GradCase:
    name: str
    build: Callable  # rng -> (fn, wrt)
    per_tensor: int = 6


def _t(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, shape), requires_grad=True)


def _proj(rng, out_shape):
    return rng.standard_normal(out_shape)


def _module_case(make_module, input_shapes, call=None):
    """Gradient case over a module's parameters plus its inputs, projected to a scalar."""
    def build(rng):
        m = make_module(rng)
        m.train()
        xs = [_t(rng, *s) for s in input_shapes]
        run = call or (lambda mod, *a: mod(*a))
        w = _proj(rng, run(m, *xs).shape)
        return (lambda: gradcheck.projection_loss(run(m, *xs), w)), xs + m.parameters()
    return build


def _prim(f, *shapes, lo=-1.0, hi=1.0):
    def build(rng):
        xs = [_t(rng, *s, lo=lo, hi=hi) for s in shapes]
        w = _proj(rng, f(*xs).shape)
        return (lambda: gradcheck.projection_loss(f(*xs), w)), xs
    return build


def _loss_case(loss_fn, target):
    def build(rng):
        x = _t(rng, 2, 1, 4, 4, lo=-2, hi=2)
        g = target(rng)
        return (lambda: loss_fn(x, g)), [x]
    return build


def _bn_case(training):
    def build(rng):
        x = _t(rng, 2, 3, 4, 4)
        gamma = _t(rng, 3, lo=0.5, hi=1.5)
        beta = _t(rng, 3)
        rm, rv = rng.standard_normal(3), rng.uniform(0.5, 2, 3)
        w = _proj(rng, x.shape)

        def fn():
            # buffers are restored so every evaluation sees the same running stats
            return gradcheck.projection_loss(T.batchnorm2d(x, gamma, beta, rm.copy(), rv.copy(), training), w)
        return fn, [x, gamma, beta]
    return build


def _binary(rng, shape=(2, 1, 4, 4)):
    g = (rng.random(shape) < 0.5).astype(np.float64)
    g.reshape(shape[0], -1)[:, 0] = 1.0
    return g


def _pyramid(rng, size=32, n=2):
    from .backbone import FeaturePyramid
    return FeaturePyramid(*(_t(rng, n, 64, size // s, size // s) for s in STRIDES))


def _pyr_case(make):
    def build(rng):
        m = make(rng)
        m.train()
        p = _pyramid(rng)
        w = _proj(rng, m(p).shape)
        return (lambda: gradcheck.projection_loss(m(p), w)), list(p.levels()) + m.parameters()
    return build


def _network_case(config: ModelConfig = None, n_params: int = 24, size: int = 64):
    """Full network at 1x3xSxS against the training loss, on a random subset of parameters."""
    def build(rng):
        model = ARNet(config or ModelConfig(), seed=int(rng.integers(1 << 16)))
        model.train()
        x = _t(rng, 1, 3, size, size, lo=0, hi=1)
        g = np.zeros((1, 1, size, size))
        g[..., size // 4: 3 * size // 4, size // 5: 3 * size // 5] = 1.0
        params = model.parameters()
        pick = sorted(rng.choice(len(params), size=min(n_params, len(params)), replace=False))
        return (lambda: total_loss(model(x), g).total), [x] + [params[i] for i in pick]
    return build


def gradient_cases(full_network: bool = True) -> list[GradCase]:
    cases = [
        GradCase("conv2d", _prim(lambda x, w, b: T.conv2d(x, w, b, padding=1), (2, 3, 5, 5), (4, 3, 3, 3), (4,))),
        GradCase("conv2d_stride2_dilated", _prim(lambda x, w: T.conv2d(x, w, stride=2, padding=2, dilation=2),
                                                 (1, 2, 7, 7), (3, 2, 3, 3))),
        GradCase("conv2d_grouped", _prim(lambda x, w: T.conv2d(x, w, padding=1, groups=2), (1, 4, 5, 5), (4, 2, 3, 3))),
        GradCase("conv2d_replicate", _prim(lambda x, w: T.conv2d(x, w, padding=1, padding_mode="replicate"),
                                           (1, 2, 5, 5), (2, 2, 3, 3))),
        GradCase("batchnorm_train", _bn_case(True)),
        GradCase("batchnorm_eval", _bn_case(False)),
        GradCase("relu", _prim(T.relu, (2, 3, 4, 4))),
        GradCase("sigmoid", _prim(T.sigmoid, (2, 3, 4, 4), lo=-4, hi=4)),
        GradCase("softmax_channels", _prim(T.softmax_channels, (2, 5, 1, 1), lo=-2, hi=2)),
        GradCase("sqrt", _prim(lambda x: T.sqrt(x, 1e-12), (2, 2, 3, 3), lo=0.1, hi=2)),
        GradCase("resize_up", _prim(lambda x: T.resize_bilinear(x, (7, 10)), (1, 2, 3, 4))),
        GradCase("resize_down", _prim(lambda x: T.resize_bilinear(x, (3, 2)), (1, 2, 8, 8))),
        GradCase("concat_split", _prim(lambda a, b: T.split_channels(T.concat_channels([a, b]), 5)[1],
                                       (1, 4, 3, 3), (1, 6, 3, 3))),
        GradCase("mul_broadcast", _prim(lambda a, b, c: T.mul(T.mul(a, b), c), (2, 3, 4, 4), (2, 1, 4, 4), (2, 3, 1, 1))),
        GradCase("add_broadcast", _prim(lambda a, b: T.add(a, b), (2, 3, 4, 4), (2, 1, 4, 4))),
        GradCase("global_avg_pool", _prim(T.global_avg_pool, (2, 3, 4, 5))),
        GradCase("channel_attention", _prim(T.channel_attention, (1, 4, 3, 3), (1, 4, 3, 3), (1, 4, 3, 3))),
        GradCase("bce_with_logits", _loss_case(T.bce_with_logits, _binary)),
        GradCase("soft_iou_loss", _loss_case(T.soft_iou_loss, _binary)),
        GradCase("dice_loss", _loss_case(lambda x, g: T.dice_loss(T.sigmoid(x), g), _binary)),
        GradCase("sobel_magnitude", _prim(priors.sobel_magnitude, (1, 2, 5, 5))),
        GradCase("ConvBlock", _module_case(lambda r: ConvBlock(3, 4, 3, r), [(2, 3, 5, 5)])),
        GradCase("DwFFN", _module_case(lambda r: DwFFN(4, r), [(2, 4, 5, 5)])),
        GradCase("RE", _pyr_case(lambda r: RegionExtraction(r)), per_tensor=3),
        GradCase("BE", _pyr_case(lambda r: BoundaryExtraction(r)), per_tensor=3),
        GradCase("FAP", _module_case(lambda r: FAP(r, channels=4), [(2, 4, 4, 4)] * 4,
                                     call=lambda m, *xs: m(list(xs))), per_tensor=3),
        GradCase("gate", _module_case(lambda r: ChannelGate(r, channels=6, out_c=4), [(2, 6, 4, 4)])),
        GradCase("HGA_elementwise", _module_case(lambda r: HGA(r, channels=4, out_c=6), [(2, 4, 6, 6), (2, 1, 3, 3), (2, 1, 6, 6)])),
        GradCase("HGA_dot_attention", _module_case(lambda r: HGA(r, channels=4, out_c=6, mode="dot_attention"),
                                                   [(2, 4, 6, 6), (2, 1, 3, 3), (2, 1, 6, 6)])),
        GradCase("MSE", _module_case(lambda r: MSE(r, channels=4), [(2, 4, 6, 6)])),
        GradCase("CIIM", _module_case(lambda r: CIIM(r), [(1, 64, 2, 2), (1, 64, 4, 4), (1, 1, 4, 4), (1, 1, 4, 4)]),
                 per_tensor=2),
        GradCase("backbone", _module_case(lambda r: BackboneStub(r), [(2, 3, 32, 32)],
                                          call=lambda m, x: T.concat_channels([T.global_avg_pool(v) for v in m(x).levels()])),
                 per_tensor=2),
    ]
    if full_network:
        cases.append(GradCase("network_64", _network_case(), per_tensor=3))
    return cases


def run_grad_case(case: GradCase, seed: int = 0) -> gradcheck.GradCheckResult:
    rng = np.random.default_rng(seed)
    fn, wrt = case.build(rng)
    return gradcheck.check(fn, wrt, rng, max_per_tensor=case.per_tensor)


# ---------------------------------------------------------------------------
# shape contracts

def shape_contract(size: int, seed: int = 0) -> list[str]:
    """Return a list of violations of the stride / channel contract at ``size``."""
    problems = []
    model = ARNet(seed=seed)
    model.train()
    x = Tensor(np.random.default_rng(seed).random((1, 3, size, size)))
    with T.no_grad():
        p = model.backbone(x)
        for i, (lvl, s) in enumerate(zip(p.levels(), STRIDES)):
            if lvl.shape != (1, 64, size // s, size // s):
                problems.append(f"X{i + 1} shape {lvl.shape} != (1, 64, {size // s}, {size // s})")
        R, B = model.re(p), model.be(p)
        if R.shape != (1, 1, size // 4, size // 4):
            problems.append(f"R shape {R.shape}")
        if B.shape != (1, 1, size // 4, size // 4):
            problems.append(f"B shape {B.shape}")
        f_in, pyr = p.X4, [p.X3, p.X2, p.X1]
        for k, (ciim, f_prime) in enumerate(zip(model.ciim[::-1], pyr)):
            out = ciim(f_in, f_prime, B, R, keep_state=True)
            st = ciim.state
            h = f_prime.shape[2]
            chain = [st["S"].shape[1], [s.shape[1] for s in st["S_split"]], st["So"].shape[1], st["f_out"].shape[1]]
            if chain != [128, [32] * 4, 32, 64]:
                problems.append(f"CIIM{3 - k} channel chain {chain} != [128, [32]*4, 32, 64]")
            if out.shape[2:] != (h, h):
                problems.append(f"CIIM{3 - k} output size {out.shape[2:]} != {(h, h)}")
            f_in = model.mse[2 - k](out)
        preds = model(x)
        for name in ("P1", "P2", "P3", "B_full"):
            if getattr(preds, name).shape != (1, 1, size, size):
                problems.append(f"{name} shape {getattr(preds, name).shape}")
    return problems


def fap_structure() -> list[str]:
    problems = []
    names = fap_block_names()
    if len(names) != 12 or len(set(names)) != 12:
        problems.append(f"expected 12 distinct fusion blocks, got {len(set(names))}")
    fap = FAP(np.random.default_rng(0), channels=2)
    parts = [Tensor(np.random.default_rng(i).random((1, 2, 3, 3))) for i in range(4)]
    with T.no_grad():
        apex, levels = fap(parts, keep_levels=True)
    if [len(lv) for lv in levels] != [4, 3, 2, 1]:
        problems.append(f"level widths {[len(lv) for lv in levels]} != [4, 3, 2, 1]")
    if sorted(fap.trace) != sorted(names):
        problems.append("trace does not visit every fusion block exactly once")
    if apex.shape != parts[0].shape:
        problems.append(f"apex shape {apex.shape}")
    return problems


def averaging_block(channels: int) -> ConvBlock:
    """A fusion unit with F(a, b) = relu((a + b) / 2): centre-tap weights, eval BN at unit stats."""
    blk = ConvBlock(2 * channels, channels, 3, np.random.default_rng(0))
    w = np.zeros_like(blk.conv.weight.data)
    for c in range(channels):
        w[c, c, 1, 1] = 0.5
        w[c, channels + c, 1, 1] = 0.5
    blk.conv.weight.data[...] = w
    blk.eval()
    # identity normalization up to the eps term
    blk.bn._buffers["running_var"][...] = 1.0 - blk.bn.eps
    return blk


def fap_symmetry(tol: float = 1e-12) -> list[str]:
    """Shared averaging fusion + equal non-negative parts: every node equals the common part."""
    c = 3
    fap = FAP(np.random.default_rng(0), channels=c, shared=averaging_block(c))
    fap.eval()
    s = Tensor(np.random.default_rng(1).random((1, c, 4, 4)))
    with T.no_grad():
        apex, levels = fap([s] * 4, keep_levels=True)
    worst = max(float(np.abs(node.data - s.data).max()) for lv in levels for node in lv)
    return [] if worst <= tol else [f"symmetry violated: max deviation {worst:.3e}"]


# ---------------------------------------------------------------------------
# sobel

def sobel_checks(tol: float = 1e-12) -> list[str]:
    problems = []
    const = Tensor(np.full((1, 1, 5, 5), 0.7))
    with T.no_grad():
        m0 = priors.sobel_magnitude(const, eps=0.0).data
        mf = priors.sobel_magnitude(const).data
    if np.abs(m0).max() > tol:
        problems.append(f"sobel: constant image magnitude {np.abs(m0).max():.3e} != 0")
    if np.abs(mf - np.sqrt(priors.SOBEL_EPS)).max() > tol:
        problems.append("sobel: constant image response differs from the sqrt(eps) floor")
    step = np.array([[0, 0, 1]] * 3, dtype=np.float64)
    with T.no_grad():
        out = priors.sobel_magnitude(Tensor(step[None, None]), eps=0.0).data[0, 0, 1, 1]
    expect = oracles.sobel_center(step.tolist())
    if abs(expect - 4.0) > tol:
        problems.append(f"sobel oracle: vertical-step center {expect} != 4")
    if abs(out - 4.0) > tol:
        problems.append(f"sobel: vertical-step center magnitude {float(out)!r} != 4")
    return problems


# ---------------------------------------------------------------------------
# metric oracles

def metric_fixtures(n: int = 12, seed: int = 0, size: int = 8):
    """Deterministic (P, G) pairs; P is constant on the foreground of every third pair
    so nearest-foreground ties cannot matter for the weighted-F comparison."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        G = np.zeros((size, size))
        r, c = rng.integers(0, size // 2, 2)
        G[r:r + rng.integers(2, size // 2 + 1), c:c + rng.integers(2, size // 2 + 1)] = 1
        P = rng.random((size, size))
        if i % 4 == 3:
            P = np.round(P * 4) / 4
        out.append((P, G))
    return out


def metric_oracle_checks(tol: float = 1e-9) -> list[str]:
    problems = []
    for i, (P, G) in enumerate(metric_fixtures()):
        Pw = np.where(G > 0, 0.65, P)
        pairs = {
            "mae": (metrics.mae(P, G), oracles.mae(P, G)),
            "s_measure": (metrics.s_measure(P, G), oracles.s_measure(P, G)),
            "e_measure_mean": (metrics.e_measure(P, G), oracles.e_measure(P, G)),
            "e_measure_max": (metrics.e_measure(P, G, "max"), oracles.e_measure(P, G, "max")),
            "e_measure_adaptive": (metrics.e_measure(P, G, "adaptive"), oracles.e_measure(P, G, "adaptive")),
            "weighted_f": (metrics.weighted_f(Pw, G), oracles.weighted_f(Pw, G)),
        }
        for k, (a, b) in pairs.items():
            if not abs(a - b) <= tol:
                problems.append(f"{k} fixture {i}: production {a!r} vs oracle {b!r}")
    G = np.zeros((8, 8))
    G[2:6, 3:7] = 1
    row = (metrics.s_measure(G, G), metrics.e_measure(G, G), metrics.weighted_f(G, G), metrics.mae(G, G))
    if max(abs(a - b) for a, b in zip(row, (1, 1, 1, 0))) > tol:
        problems.append(f"perfect prediction row {row} != (1, 1, 1, 0)")
    P = np.zeros((4, 4))
    Gd = np.zeros((4, 4))
    P[0, 0:4] = 1
    Gd[0, 2:4] = 1
    Gd[1, 0:2] = 1
    d, u = metrics.dice_iou(P, Gd)
    if abs(d - 0.5) > tol or abs(u - 1 / 3) > tol:
        problems.append(f"dice/iou overlap fixture ({d}, {u}) != (0.5, 1/3)")
    return problems


# ---------------------------------------------------------------------------
# runner

@contextlib.contextmanager
def injected_fault(name: str = None):
    """Test hook: corrupt a constant for the duration of the block."""
    if name is None:
        yield
        return
    if name != "sobel":
        raise ValueError(f"unknown fault {name!r}")
    saved = priors.SOBEL_X
    priors.SOBEL_X = saved * np.array([[1, 1, 1], [1.0, 1, 1.5], [1, 1, 1]])
    try:
        yield
    finally:
        priors.SOBEL_X = saved


def suites(full: bool = True) -> dict:
    def grad_checks():
        out = []
        for case in gradient_cases(full_network=full):
            res = run_grad_case(case)
            out.append((f"gradient {case.name}", res.ok(GRAD_TOL),
                        f"max rel err {res.max_rel_error:.2e} over {res.checked} coords"))
        return out

    def shape_checks():
        out = []
        for size in ((64, 96, 128, 416) if full else (64,)):
            probs = shape_contract(size)
            out.append((f"shape contract {size}", not probs, "; ".join(probs) or "ok"))
        for name, fn in (("fap structure", fap_structure), ("fap symmetry", fap_symmetry)):
            probs = fn()
            out.append((name, not probs, "; ".join(probs) or "ok"))
        return out

    def sobel_suite():
        probs = sobel_checks()
        return [("sobel invariants", not probs, "; ".join(probs) or "ok")]

    def metric_suite():
        probs = metric_oracle_checks()
        return [("metric oracles", not probs, "; ".join(probs[:5]) or "ok")]

    return {"gradients": grad_checks, "shapes": shape_checks, "sobel": sobel_suite, "metrics": metric_suite}


def run(full: bool = True, fault: str = None, out=print) -> bool:
    all_ok = True
    t0 = time.perf_counter()
    with injected_fault(fault):
        for suite, fn in suites(full).items():
            results = fn()
            passed = sum(ok for _, ok, _ in results)
            out(f"[{suite}] {passed}/{len(results)} passed")
            for name, ok, detail in results:
                if not ok:
                    all_ok = False
                    out(f"  FAIL {name}: {detail}")
    out(f"selfcheck {'PASSED' if all_ok else 'FAILED'} in {time.perf_counter() - t0:.1f}s")
    return all_ok
