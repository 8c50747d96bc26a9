"""Slow, loop-based reference implementations of the evaluation metrics.

These share no code with :mod:`arnet.metrics`; they exist to cross-check it
on small fixtures (tests and ``arnet selfcheck``). Inputs are lists of lists
or 2-d arrays; everything is computed with Python floats.
"""

from __future__ import annotations

import math

EPS = 2.220446049250313e-16


def _grid(a):
    return [[float(v) for v in row] for row in a]


def _dims(a):
    return len(a), len(a[0])


def mae(P, G) -> float:
    P, G = _grid(P), _grid(G)
    h, w = _dims(P)
    return math.fsum(abs(P[i][j] - G[i][j]) for i in range(h) for j in range(w)) / (h * w)


def _mean(xs):
    return math.fsum(xs) / len(xs)


def _std1(xs):
    if len(xs) < 2:
        return 0.0
    m = _mean(xs)
    return math.sqrt(math.fsum((x - m) ** 2 for x in xs) / (len(xs) - 1))


def _obj(xs):
    if not xs:
        return 0.0
    m = _mean(xs)
    return 2 * m / (m * m + 1 + _std1(xs) + EPS)


def _ssim_block(p, g):
    n = len(p)
    if n == 0:
        return 0.0
    x, y = _mean(p), _mean(g)
    sx = math.fsum((a - x) ** 2 for a in p) / (n - 1 + EPS)
    sy = math.fsum((b - y) ** 2 for b in g) / (n - 1 + EPS)
    sxy = math.fsum((a - x) * (b - y) for a, b in zip(p, g)) / (n - 1 + EPS)
    alpha = 4 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0:
        return alpha / (beta + EPS)
    return 1.0 if beta == 0 else 0.0


def s_measure(P, G, alpha: float = 0.5) -> float:
    """Structure measure: alpha * object term + (1 - alpha) * region term."""
    P = _grid(P)
    G = [[1.0 if v >= 0.5 else 0.0 for v in row] for row in _grid(G)]
    h, w = _dims(P)
    cells = [(i, j) for i in range(h) for j in range(w)]
    fg = [(i, j) for i, j in cells if G[i][j] == 1.0]
    if not fg:
        return 1.0 - _mean([P[i][j] for i, j in cells])
    if len(fg) == h * w:
        return _mean([P[i][j] for i, j in cells])
    u = len(fg) / (h * w)
    o_fg = _obj([P[i][j] for i, j in cells if G[i][j] == 1.0])
    o_bg = _obj([1.0 - P[i][j] for i, j in cells if G[i][j] == 0.0])
    s_obj = u * o_fg + (1 - u) * o_bg
    # centroid in 1-based coordinates, rounded half up
    X = int(math.floor(_mean([j + 1 for _, j in fg]) + 0.5))
    Y = int(math.floor(_mean([i + 1 for i, _ in fg]) + 0.5))
    s_reg = 0.0
    for rows, cols in (((0, Y), (0, X)), ((0, Y), (X, w)), ((Y, h), (0, X)), ((Y, h), (X, w))):
        block = [(i, j) for i in range(*rows) for j in range(*cols)]
        weight = len(block) / (h * w)
        if weight > 0:
            s_reg += weight * _ssim_block([P[i][j] for i, j in block], [G[i][j] for i, j in block])
    return max(0.0, alpha * s_obj + (1 - alpha) * s_reg)


def enhanced_alignment(FM, G) -> float:
    """Enhanced-alignment score of a binary map FM against binary G."""
    h, w = _dims(FM)
    n = h * w
    sg = sum(G[i][j] for i in range(h) for j in range(w))
    sf = sum(FM[i][j] for i in range(h) for j in range(w))
    if sg == 0:
        return (n - sf) / n
    if sg == n:
        return sf / n
    mf, mg = sf / n, sg / n
    acc = []
    for i in range(h):
        for j in range(w):
            af = FM[i][j] - mf
            ag = G[i][j] - mg
            a = 2 * af * ag / (af * af + ag * ag + EPS)
            acc.append((a + 1) ** 2 / 4)
    return math.fsum(acc) / n


def e_measure_curve(P, G, n_thresholds: int = 256) -> list[float]:
    P = _grid(P)
    G = [[1.0 if v >= 0.5 else 0.0 for v in row] for row in _grid(G)]
    h, w = _dims(P)
    out = []
    for k in range(n_thresholds):
        t = (k + 1) / n_thresholds
        FM = [[1.0 if P[i][j] >= t else 0.0 for j in range(w)] for i in range(h)]
        out.append(enhanced_alignment(FM, G))
    return out


def e_measure(P, G, variant: str = "mean", n_thresholds: int = 256) -> float:
    if variant == "adaptive":
        Pg = _grid(P)
        h, w = _dims(Pg)
        t = min(2 * math.fsum(v for row in Pg for v in row) / (h * w), 1.0)
        Gb = [[1.0 if v >= 0.5 else 0.0 for v in row] for row in _grid(G)]
        FM = [[1.0 if Pg[i][j] >= t else 0.0 for j in range(w)] for i in range(h)]
        return enhanced_alignment(FM, Gb)
    curve = e_measure_curve(P, G, n_thresholds)
    return math.fsum(curve) / len(curve) if variant == "mean" else max(curve)


def _gauss(size=7, sigma=5.0):
    r = (size - 1) // 2
    k = [[math.exp(-(x * x + y * y) / (2 * sigma * sigma)) for x in range(-r, r + 1)] for y in range(-r, r + 1)]
    s = math.fsum(v for row in k for v in row)
    return [[v / s for v in row] for row in k]


def weighted_f(P, G, beta2: float = 1.0) -> float:
    """Weighted F-measure with brute-force nearest-foreground search.

    Ties between equidistant foreground pixels resolve to the first one in
    raster order; use fixtures whose error is constant over the foreground
    when comparing with other implementations.
    """
    P = _grid(P)
    G = [[1 if v >= 0.5 else 0 for v in row] for row in _grid(G)]
    h, w = _dims(P)
    fg = [(i, j) for i in range(h) for j in range(w) if G[i][j]]
    if not fg:
        return 0.0
    E = [[abs(P[i][j] - G[i][j]) for j in range(w)] for i in range(h)]
    Et = [row[:] for row in E]
    D = [[0.0] * w for _ in range(h)]
    for i in range(h):
        for j in range(w):
            if not G[i][j]:
                best = None
                for a, b in fg:
                    d2 = (a - i) ** 2 + (b - j) ** 2
                    if best is None or d2 < best[0]:
                        best = (d2, a, b)
                D[i][j] = math.sqrt(best[0])
                Et[i][j] = E[best[1]][best[2]]
    K = _gauss()
    EA = [[0.0] * w for _ in range(h)]
    for i in range(h):
        for j in range(w):
            acc = []
            for di in range(-3, 4):
                for dj in range(-3, 4):
                    a, b = i + di, j + dj
                    if 0 <= a < h and 0 <= b < w:
                        acc.append(K[di + 3][dj + 3] * Et[a][b])
            EA[i][j] = math.fsum(acc)
    Ew = [[0.0] * w for _ in range(h)]
    for i in range(h):
        for j in range(w):
            if G[i][j]:
                Ew[i][j] = min(E[i][j], EA[i][j])
            else:
                Ew[i][j] = E[i][j] * (2.0 - math.exp(math.log(0.5) / 5.0 * D[i][j]))
    ew_fg = math.fsum(Ew[i][j] for i, j in fg)
    tpw = len(fg) - ew_fg
    fpw = math.fsum(Ew[i][j] for i in range(h) for j in range(w) if not G[i][j])
    R = 1.0 - ew_fg / len(fg)
    Pw = tpw / (EPS + tpw + fpw)
    return (1 + beta2) * R * Pw / (EPS + R + beta2 * Pw)


def dice_iou(P, G, threshold: float = 0.5):
    P, G = _grid(P), _grid(G)
    h, w = _dims(P)
    A = {(i, j) for i in range(h) for j in range(w) if P[i][j] >= threshold}
    B = {(i, j) for i in range(h) for j in range(w) if G[i][j] >= 0.5}
    if not A and not B:
        return 1.0, 1.0
    return 2 * len(A & B) / (len(A) + len(B)), len(A & B) / len(A | B)


def sobel_center(patch) -> float:
    """Gradient magnitude at the centre of a 3x3 patch, from the textbook kernels."""
    kx = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]
    ky = [[1, 2, 1], [0, 0, 0], [-1, -2, -1]]
    gx = sum(kx[a][b] * patch[a][b] for a in range(3) for b in range(3))
    gy = sum(ky[a][b] * patch[a][b] for a in range(3) for b in range(3))
    return math.sqrt(gx * gx + gy * gy)
