"""Segmentation quality metrics: MAE, S-measure, E-measure, weighted F, Dice/IoU.

Conventions for degenerate ground truth follow the community MATLAB toolkit
unless noted: an empty foreground gives S = 1 - mean(P) and weighted F = 0.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

EPS = np.finfo(np.float64).eps


@dataclass
class MetricConfig:
    s_alpha: float = 0.5
    e_variant: str = "mean"
    f_beta2: float = 1.0
    n_thresholds: int = 256
    binarize_at: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.s_alpha <= 1.0:
            raise ValueError(f"s_alpha must lie in [0, 1], got {self.s_alpha}")
        if self.n_thresholds < 2:
            raise ValueError(f"n_thresholds must be >= 2, got {self.n_thresholds}")
        if self.e_variant not in ("mean", "max", "adaptive"):
            raise ValueError(f"e_variant must be mean, max or adaptive, got {self.e_variant!r}")


def _prep(P, G):
    P = np.asarray(P, dtype=np.float64)
    G = np.asarray(G)
    if P.shape != G.shape:
        raise ValueError(f"prediction shape {P.shape} != ground-truth shape {G.shape}")
    return P, G.astype(bool)


def mae(P, G) -> float:
    P, G = _prep(P, G)
    return float(np.abs(P - G).mean())


# ---------------------------------------------------------------------------
# S-measure

def _object_score(x: np.ndarray) -> float:
    if x.size == 0:
        return 0.0
    mu = x.mean()
    sigma = x.std(ddof=1) if x.size > 1 else 0.0
    return float(2.0 * mu / (mu * mu + 1.0 + sigma + EPS))


def _s_object(P, G) -> float:
    fg = np.where(G, P, 0.0)
    bg = np.where(~G, 1.0 - P, 0.0)
    u = G.mean()
    return u * _object_score(fg[G]) + (1 - u) * _object_score(bg[~G])


def _centroid(G):
    """1-based centroid, rounded half away from zero (MATLAB ``round``)."""
    h, w = G.shape
    total = G.sum()
    if total == 0:
        return int(np.floor(w / 2 + 0.5)), int(np.floor(h / 2 + 0.5))
    ys, xs = np.nonzero(G)
    x = int(np.floor(xs.mean() + 1 + 0.5))
    y = int(np.floor(ys.mean() + 1 + 0.5))
    return x, y


def _ssim(P, G) -> float:
    N = P.size
    if N == 0:
        return 0.0
    g = G.astype(np.float64)
    x, y = P.mean(), g.mean()
    sx = ((P - x) ** 2).sum() / (N - 1 + EPS)
    sy = ((g - y) ** 2).sum() / (N - 1 + EPS)
    sxy = ((P - x) * (g - y)).sum() / (N - 1 + EPS)
    alpha = 4 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0:
        return float(alpha / (beta + EPS))
    if beta == 0:
        return 1.0
    return 0.0


def _s_region(P, G) -> float:
    h, w = G.shape
    X, Y = _centroid(G)
    area = h * w
    w1 = X * Y / area
    w2 = (w - X) * Y / area
    w3 = X * (h - Y) / area
    w4 = 1.0 - w1 - w2 - w3
    quads = [(slice(0, Y), slice(0, X)), (slice(0, Y), slice(X, w)),
             (slice(Y, h), slice(0, X)), (slice(Y, h), slice(X, w))]
    return sum(wk * _ssim(P[q], G[q]) for wk, q in zip((w1, w2, w3, w4), quads) if wk > 0)


def s_measure(P, G, alpha: float = 0.5) -> float:
    P, G = _prep(P, G)
    y = G.mean()
    if y == 0:
        return float(1.0 - P.mean())
    if y == 1:
        return float(P.mean())
    s = alpha * _s_object(P, G) + (1 - alpha) * _s_region(P, G)
    return float(max(0.0, s))


# ---------------------------------------------------------------------------
# E-measure

def thresholds(n: int) -> np.ndarray:
    """``n`` evenly spaced thresholds in (0, 1]; binarization is ``P >= t``."""
    return np.arange(1, n + 1, dtype=np.float64) / n


def _enhanced_from_counts(tp, fp, fn, tn, n_pix):
    """Mean enhanced-alignment score of binary maps summarized by confusion counts.

    Each confusion cell has a constant alignment value, so the per-pixel map
    never needs to be materialized.
    """
    tp, fp, fn, tn = (np.asarray(v, dtype=np.float64) for v in (tp, fp, fn, tn))
    g_fg = tp + fn
    mu_f = (tp + fp) / n_pix
    mu_g = g_fg / n_pix
    score = np.zeros_like(mu_f)
    # cells: (fm, gt) in {(1,1), (1,0), (0,1), (0,0)}
    for count, fm, gt in ((tp, 1.0, 1.0), (fp, 1.0, 0.0), (fn, 0.0, 1.0), (tn, 0.0, 0.0)):
        af = fm - mu_f
        ag = gt - mu_g
        align = 2 * ag * af / (ag * ag + af * af + EPS)
        score += count * (align + 1) ** 2 / 4
    return score / n_pix


def _degenerate_enhanced(fm_fg, G_all_zero, n_pix):
    # empty GT: enhanced = 1 - FM; full GT: enhanced = FM
    return (n_pix - fm_fg) / n_pix if G_all_zero else fm_fg / n_pix


def e_measure_curve(P, G, n_thresholds: int = 256) -> np.ndarray:
    """Enhanced-alignment score at every threshold of :func:`thresholds`."""
    P, G = _prep(P, G)
    n_pix = P.size
    ts = thresholds(n_thresholds)
    pf = P[G]
    pb = P[~G]
    # counts of P >= t via sorted arrays
    tp = pf.size - np.searchsorted(np.sort(pf), ts, side="left")
    fp = pb.size - np.searchsorted(np.sort(pb), ts, side="left")
    if pf.size == 0 or pb.size == 0:
        return _degenerate_enhanced(tp + fp, pf.size == 0, n_pix).astype(np.float64)
    fn = pf.size - tp
    tn = pb.size - fp
    return _enhanced_from_counts(tp, fp, fn, tn, n_pix)


def e_measure_at(P, G, t: float) -> float:
    P, G = _prep(P, G)
    fm = P >= t
    n_pix = P.size
    if G.all() or not G.any():
        return float(_degenerate_enhanced(fm.sum(), not G.any(), n_pix))
    tp = np.sum(fm & G)
    fp = np.sum(fm & ~G)
    fn = np.sum(~fm & G)
    tn = np.sum(~fm & ~G)
    return float(_enhanced_from_counts(tp, fp, fn, tn, n_pix))


def e_measure(P, G, variant: str = "mean", n_thresholds: int = 256) -> float:
    if variant == "adaptive":
        P_, _ = _prep(P, G)
        return e_measure_at(P, G, min(2 * P_.mean(), 1.0))
    curve = e_measure_curve(P, G, n_thresholds)
    if variant == "mean":
        return float(curve.mean())
    if variant == "max":
        return float(curve.max())
    raise ValueError(f"unknown E-measure variant {variant!r}")


# ---------------------------------------------------------------------------
# weighted F-measure

def gaussian_kernel(size: int = 7, sigma: float = 5.0) -> np.ndarray:
    r = (size - 1) / 2
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    k = np.exp(-(x * x + y * y) / (2 * sigma * sigma))
    return k / k.sum()


def weighted_f(P, G, beta2: float = 1.0) -> float:
    P, G = _prep(P, G)
    if not G.any():
        return 0.0
    E = np.abs(P - G)
    dist, idx = ndimage.distance_transform_edt(~G, return_indices=True)
    # background pixels inherit the error of their nearest foreground pixel
    Et = E.copy()
    bg = ~G
    Et[bg] = E[idx[0][bg], idx[1][bg]]
    EA = ndimage.correlate(Et, gaussian_kernel(), mode="constant", cval=0.0)
    MIN_E_EA = E.copy()
    sel = G & (EA < E)
    MIN_E_EA[sel] = EA[sel]
    Bw = np.ones_like(G, dtype=np.float64)
    Bw[bg] = 2.0 - np.exp(np.log(0.5) / 5.0 * dist[bg])
    Ew = MIN_E_EA * Bw
    TPw = G.sum() - Ew[G].sum()
    FPw = Ew[bg].sum()
    R = 1.0 - Ew[G].mean()
    Pw = TPw / (EPS + TPw + FPw)
    return float((1 + beta2) * R * Pw / (EPS + R + beta2 * Pw))


# ---------------------------------------------------------------------------
# Dice / IoU

def dice_iou(P, G, threshold: float = 0.5) -> tuple[float, float]:
    P, G = _prep(P, G)
    B = P >= threshold
    inter = np.sum(B & G)
    sb, sg = B.sum(), G.sum()
    union = sb + sg - inter
    if sb + sg == 0:
        return 1.0, 1.0
    return float(2 * inter / (sb + sg)), float(inter / union)


# ---------------------------------------------------------------------------
# dataset evaluation

COLUMNS = ("s", "e", "fw", "mae", "dice", "iou")


@dataclass
class ImageRecord:
    image: str
    s: float
    e: float
    fw: float
    mae: float
    dice: float
    iou: float
    flags: tuple = ()

    def row(self):
        return [getattr(self, c) for c in COLUMNS]


@dataclass
class MetricReport:
    dataset: str
    config: MetricConfig
    records: list = field(default_factory=list)
    errors: list = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.records)

    def means(self) -> dict:
        if not self.records:
            return {c: float("nan") for c in COLUMNS}
        return {c: float(np.mean([getattr(r, c) for r in self.records])) for c in COLUMNS}

    def header(self) -> str:
        return (f"# dataset={self.dataset} images={self.count} e_variant={self.config.e_variant} "
                f"n_thresholds={self.config.n_thresholds} s_alpha={self.config.s_alpha} "
                f"dice_iou_threshold={self.config.binarize_at}")

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["image", *COLUMNS])
            for r in self.records:
                w.writerow([r.image, *(repr(v) for v in r.row())])

    def table(self) -> str:
        head = ["Dataset", "S_alpha", "E_phi", "F_beta^w", "M", "mDice", "mIoU"]
        m = self.means()
        vals = [self.dataset] + [f"{m[c]:.4f}" for c in COLUMNS]
        widths = [max(len(a), len(b)) for a, b in zip(head, vals)]
        fmt = "  ".join(f"{{:>{w}}}" for w in widths)
        lines = [self.header(), fmt.format(*head), fmt.format(*vals)]
        flagged = [r for r in self.records if r.flags]
        if flagged:
            lines.append("# degenerate ground truth: " + ", ".join(f"{r.image}({'/'.join(r.flags)})" for r in flagged))
        return "\n".join(lines)


def normalize_prediction(P: np.ndarray) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    lo, hi = P.min(), P.max()
    if lo < 0 or hi > 1:
        return (P - lo) / (hi - lo + 1e-12)
    return P


def evaluate_pair(P, G, config: MetricConfig = None, name: str = "") -> ImageRecord:
    config = config or MetricConfig()
    P = normalize_prediction(P)
    G = np.asarray(G) >= 0.5
    if P.shape != G.shape:
        from .tensor import resize_array
        P = np.clip(resize_array(P, G.shape), 0.0, 1.0)
    flags = ()
    if not G.any():
        flags = ("empty_gt",)
    elif G.all():
        flags = ("full_gt",)
    d, i = dice_iou(P, G, config.binarize_at)
    return ImageRecord(
        image=name,
        s=s_measure(P, G, config.s_alpha),
        e=e_measure(P, G, config.e_variant, config.n_thresholds),
        fw=weighted_f(P, G, config.f_beta2),
        mae=mae(P, G),
        dice=d,
        iou=i,
        flags=flags,
    )


class NoPairsError(ValueError):
    pass


def _stems(d: Path) -> dict:
    out = {}
    for p in sorted(d.iterdir()):
        if p.is_file() and p.suffix.lower() in (".pgm", ".ppm", ".pnm", ".png"):
            out.setdefault(p.stem, p)
    return out


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("ARNET_THREADS", "1")))
    except ValueError:
        return 1


def evaluate_dir(pred_dir, gt_dir, config: MetricConfig = None, dataset: str = None) -> MetricReport:
    """Evaluate every prediction that has a same-stem ground-truth mask.

    Per-file problems (unmatched stems, unreadable files) are collected in
    ``report.errors``; evaluation continues with the remaining pairs.
    """
    from .data import load_map

    config = config or MetricConfig()
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    preds, gts = _stems(pred_dir), _stems(gt_dir)
    common = sorted(set(preds) & set(gts))
    report = MetricReport(dataset or gt_dir.name, config)
    if not common:
        raise NoPairsError(f"no prediction/ground-truth pairs: {pred_dir} and {gt_dir} share no file stems")
    for s in sorted(set(preds) ^ set(gts)):
        where = "ground truth" if s in preds else "prediction"
        report.errors.append(f"{s}: no matching {where} file")

    def one(stem):
        try:
            P = load_map(preds[stem])
            G = load_map(gts[stem])
            return evaluate_pair(P, G, config, stem), None
        except Exception as exc:  # reported per file, run continues
            return None, f"{stem}: {exc}"

    with ThreadPoolExecutor(max_workers=worker_count()) as ex:
        results = list(ex.map(one, common))
    for rec, err in results:
        if err:
            report.errors.append(err)
        else:
            report.records.append(rec)
    return report
