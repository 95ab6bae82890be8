"""Loop-based reference implementations written straight from the definitions.

Nothing here imports from ``fmamba``; every quantity is recomputed pixel by
pixel with plain Python arithmetic so it can serve as an independent oracle.
"""
from __future__ import annotations

import math

import numpy as np


def gaussian(size: int, sigma: float) -> list[list[float]]:
    c = (size - 1) / 2
    g = [[math.exp(-((i - c) ** 2 + (j - c) ** 2) / (2 * sigma * sigma)) for j in range(size)]
         for i in range(size)]
    s = math.fsum(v for row in g for v in row)
    return [[v / s for v in row] for row in g]


def conv2d_same(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Zero-padded cross-correlation, ``x`` [H, W, Cin], ``w`` [kh, kw, Cin, Cout]."""
    H, W, Cin = x.shape
    kh, kw, _, Cout = w.shape
    out = np.zeros((H, W, Cout))
    for h in range(H):
        for v in range(W):
            for o in range(Cout):
                acc = 0.0
                for i in range(kh):
                    for j in range(kw):
                        y, z = h + i - kh // 2, v + j - kw // 2
                        if 0 <= y < H and 0 <= z < W:
                            for c in range(Cin):
                                acc += x[y, z, c] * w[i, j, c, o]
                out[h, v, o] = acc
    return out


def depthwise_same(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    H, W, C = x.shape
    k = w.shape[0]
    out = np.zeros_like(x)
    for h in range(H):
        for v in range(W):
            for c in range(C):
                acc = 0.0
                for i in range(k):
                    for j in range(k):
                        y, z = h + i - k // 2, v + j - k // 2
                        if 0 <= y < H and 0 <= z < W:
                            acc += x[y, z, c] * w[i, j, c]
                out[h, v, c] = acc
    return out


# --------------------------------------------------------------------------- SSIM family

def _window_stats(x, y, i, j, g):
    n = len(g)
    mx = my = 0.0
    for a in range(n):
        for b in range(n):
            mx += g[a][b] * x[i + a][j + b]
            my += g[a][b] * y[i + a][j + b]
    vx = vy = cxy = 0.0
    for a in range(n):
        for b in range(n):
            dx = x[i + a][j + b] - mx
            dy = y[i + a][j + b] - my
            vx += g[a][b] * dx * dx
            vy += g[a][b] * dy * dy
            cxy += g[a][b] * dx * dy
    return mx, my, vx, vy, cxy


def ssim_and_cs(x: np.ndarray, y: np.ndarray, L: float = 1.0) -> tuple[float, float]:
    g = gaussian(11, 1.5)
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    xs, ys = x.tolist(), y.tolist()
    s_vals, cs_vals = [], []
    for i in range(x.shape[0] - 10):
        for j in range(x.shape[1] - 10):
            mx, my, vx, vy, cxy = _window_stats(xs, ys, i, j, g)
            cs = (2 * cxy + c2) / (vx + vy + c2)
            s_vals.append((2 * mx * my + c1) / (mx * mx + my * my + c1) * cs)
            cs_vals.append(cs)
    return math.fsum(s_vals) / len(s_vals), math.fsum(cs_vals) / len(cs_vals)


def halve(x: np.ndarray) -> np.ndarray:
    H, W = x.shape[0] // 2, x.shape[1] // 2
    out = np.empty((H, W))
    for i in range(H):
        for j in range(W):
            out[i, j] = (x[2 * i, 2 * j] + x[2 * i, 2 * j + 1] + x[2 * i + 1, 2 * j] + x[2 * i + 1, 2 * j + 1]) / 4
    return out


def ms_ssim(x: np.ndarray, y: np.ndarray, scales: int) -> float:
    weights = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333][:scales]
    total = math.fsum(weights)
    value = 1.0
    for j in range(scales):
        s, cs = ssim_and_cs(x, y)
        term = s if j == scales - 1 else cs
        value *= max(term, 0.0) ** (weights[j] / total)
        x, y = halve(x), halve(y)
    return value


# --------------------------------------------------------------------------- SCD

def pearson(a: np.ndarray, b: np.ndarray):
    av, bv = a.ravel().tolist(), b.ravel().tolist()
    ma, mb = math.fsum(av) / len(av), math.fsum(bv) / len(bv)
    sab = math.fsum((p - ma) * (q - mb) for p, q in zip(av, bv))
    saa = math.fsum((p - ma) ** 2 for p in av)
    sbb = math.fsum((q - mb) ** 2 for q in bv)
    if saa == 0 or sbb == 0:
        return None
    return sab / math.sqrt(saa * sbb)


def scd(I1, I2, If) -> float:
    total = 0.0
    for r in (pearson(If - I2, I1), pearson(If - I1, I2)):
        total += 0.0 if r is None else r
    return total


# --------------------------------------------------------------------------- gradients

SX = ((-1, 0, 1), (-2, 0, 2), (-1, 0, 1))
SY = ((-1, -2, -1), (0, 0, 0), (1, 2, 1))


def sobel_replicate(img: np.ndarray):
    H, W = img.shape
    gx = np.zeros((H, W))
    gy = np.zeros((H, W))
    for i in range(H):
        for j in range(W):
            sx = sy = 0.0
            for a in range(3):
                for b in range(3):
                    v = img[min(max(i + a - 1, 0), H - 1), min(max(j + b - 1, 0), W - 1)]
                    sx += SX[a][b] * v
                    sy += SY[a][b] * v
            gx[i, j], gy[i, j] = sx, sy
    return gx, gy


def _orientation(gx: float, gy: float) -> float:
    if gx == 0:
        return 0.0 if gy == 0 else math.copysign(math.pi / 2, gy)
    return math.atan(gy / gx)


def qabf(I1, I2, If) -> float:
    gs = []
    for img in (I1, I2, If):
        gx, gy = sobel_replicate(img)
        g = np.hypot(gx, gy)
        al = np.vectorize(_orientation)(gx, gy)
        gs.append((g, al))
    (gA, aA), (gB, aB), (gF, aF) = gs
    num = den = 0.0
    H, W = I1.shape
    for i in range(H):
        for j in range(W):
            for gS, aS in ((gA, aA), (gB, aB)):
                s, f = gS[i, j], gF[i, j]
                if s == 0 and f == 0:
                    G = 0.0
                elif s > f:
                    G = f / s
                else:
                    G = s / f
                d = abs(aS[i, j] - aF[i, j])
                A = 1 - min(d, math.pi - d) / (math.pi / 2)
                Qg = 0.9994 / (1 + math.exp(-15 * (G - 0.5)))
                Qa = 0.9879 / (1 + math.exp(-22 * (A - 0.8)))
                num += Qg * Qa * s
                den += s
    return num / den if den > 0 else 0.0


# --------------------------------------------------------------------------- FMI

def _bins(x: np.ndarray, bins: int = 256) -> list[int]:
    vals = x.ravel().tolist()
    lo, hi = min(vals), max(vals)
    if hi <= lo:
        return [0] * len(vals)
    return [min(int(math.floor((v - lo) / (hi - lo) * bins)), bins - 1) for v in vals]


def _H(counts: dict, n: int) -> float:
    return -math.fsum((c / n) * math.log2(c / n) for c in counts.values())


def nmi(a: np.ndarray, f: np.ndarray) -> float:
    ia, jf = _bins(a), _bins(f)
    n = len(ia)
    ca, cf, cj = {}, {}, {}
    for p, q in zip(ia, jf):
        ca[p] = ca.get(p, 0) + 1
        cf[q] = cf.get(q, 0) + 1
        cj[(p, q)] = cj.get((p, q), 0) + 1
    ha, hf = _H(ca, n), _H(cf, n)
    if ha <= 0 or hf <= 0:
        return 0.0
    return 2 * (ha + hf - _H(cj, n)) / (ha + hf)


def fmi(I1, I2, If) -> float:
    feats = []
    for img in (I1, I2, If):
        gx, gy = sobel_replicate(img)
        feats.append(np.sqrt(gx * gx + gy * gy))
    return 0.5 * (nmi(feats[0], feats[2]) + nmi(feats[1], feats[2]))


# --------------------------------------------------------------------------- VIF

def _filter_valid(x: np.ndarray, g) -> np.ndarray:
    n = len(g)
    H, W = x.shape[0] - n + 1, x.shape[1] - n + 1
    out = np.zeros((max(H, 0), max(W, 0)))
    for i in range(max(H, 0)):
        for j in range(max(W, 0)):
            out[i, j] = math.fsum(g[a][b] * x[i + a, j + b] for a in range(n) for b in range(n))
    return out


def vif_single(ref: np.ndarray, dist: np.ndarray, eps: float = 1e-10, sigma_n: float = 2.0) -> float:
    ref, dist = ref * 255.0, dist * 255.0
    num = den = 0.0
    for scale in range(4):
        n = 2 ** (4 - scale) + 1
        g = gaussian(n, n / 5)
        if scale > 0:
            ref = _filter_valid(ref, g)[::2, ::2]
            dist = _filter_valid(dist, g)[::2, ::2]
        H, W = ref.shape[0] - n + 1, ref.shape[1] - n + 1
        if H <= 0 or W <= 0:
            continue
        s_num = s_den = 0.0
        for i in range(H):
            for j in range(W):
                pr, pd = ref[i:i + n, j:j + n], dist[i:i + n, j:j + n]
                m1 = math.fsum(g[a][b] * pr[a, b] for a in range(n) for b in range(n))
                m2 = math.fsum(g[a][b] * pd[a, b] for a in range(n) for b in range(n))
                e11 = math.fsum(g[a][b] * pr[a, b] * pr[a, b] for a in range(n) for b in range(n))
                e22 = math.fsum(g[a][b] * pd[a, b] * pd[a, b] for a in range(n) for b in range(n))
                e12 = math.fsum(g[a][b] * pr[a, b] * pd[a, b] for a in range(n) for b in range(n))
                s1, s2 = max(e11 - m1 * m1, 0.0), max(e22 - m2 * m2, 0.0)
                s12 = e12 - m1 * m2
                gain = s12 / (s1 + eps)
                sv = s2 - gain * s12
                if s1 < eps:
                    gain, sv, s1 = 0.0, s2, 0.0
                if s2 < eps:
                    gain, sv = 0.0, 0.0
                if gain < 0:
                    sv, gain = s2, 0.0
                sv = max(sv, eps)
                s_num += math.log10(1 + gain * gain * s1 / (sv + sigma_n))
                s_den += math.log10(1 + s1 / sigma_n)
        if s_den <= 0:
            continue
        num += s_num
        den += s_den
    return num / den if den > 0 else 0.0


def vif(I1, I2, If) -> float:
    return 0.5 * (vif_single(I1, If) + vif_single(I2, If))
