"""Reference-based fusion quality metrics: VIF, SCD, Q^AB/F, MS-SSIM and FMI.

All functions take float images in [0, 1] (``[H, W]`` arrays) and return
plain floats. Degenerate terms (zero variance, flat gradients) contribute 0
instead of NaN; the ``*_terms`` helpers report when that happened.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .losses import SSIM_K1, SSIM_K2, SSIM_WINDOW, gaussian_window

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
QABF_G = (0.9994, -15.0, 0.5)   # (Gamma, kappa, sigma) for edge strength
QABF_A = (0.9879, -22.0, 0.8)   # ... and for orientation
VIF_NOISE_VAR = 2.0
VIF_SCALES = 4
FMI_BINS = 256
_EPS = 1e-10

_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T.copy()


def _img(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected an [H, W] image, got shape {a.shape}")
    return a


def _triple(I1, I2, If):
    a, b, f = _img(I1), _img(I2), _img(If)
    if not a.shape == b.shape == f.shape:
        raise ValueError(f"image shapes differ: {a.shape}, {b.shape}, {f.shape}")
    return a, b, f


def filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """2-D correlation keeping only fully-covered positions."""
    kh, kw = kernel.shape
    if img.shape[0] < kh or img.shape[1] < kw:
        return np.zeros((max(img.shape[0] - kh + 1, 0), max(img.shape[1] - kw + 1, 0)))
    return np.einsum("hwij,ij->hw", sliding_window_view(img, kernel.shape), kernel)


def sobel_components(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Horizontal and vertical Sobel responses with edge-replicated borders."""
    padded = np.pad(img, 1, mode="edge")
    return filter_valid(padded, _SOBEL_X), filter_valid(padded, _SOBEL_Y)


# --------------------------------------------------------------------------- MS-SSIM

def _ssim_parts(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Mean SSIM and mean contrast-structure term over valid Gaussian windows."""
    win = gaussian_window()
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    mx, my = filter_valid(x, win), filter_valid(y, win)
    sxx = filter_valid(x * x, win) - mx * mx
    syy = filter_valid(y * y, win) - my * my
    sxy = filter_valid(x * y, win) - mx * my
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    return float(np.mean(lum * cs)), float(np.mean(cs))


def _avg_pool2(x: np.ndarray) -> np.ndarray:
    H, W = x.shape[0] // 2 * 2, x.shape[1] // 2 * 2
    x = x[:H, :W]
    return 0.25 * (x[0::2, 0::2] + x[0::2, 1::2] + x[1::2, 0::2] + x[1::2, 1::2])


def max_scales(shape: tuple[int, int], limit: int = len(MS_SSIM_WEIGHTS)) -> int:
    n, m = min(shape), 0
    while m < limit and n >= SSIM_WINDOW:
        m += 1
        n //= 2
    return m


def ms_ssim(x, y, scales: Optional[int] = None) -> float:
    """Multi-scale SSIM with 2x average-pool downsampling.

    ``scales=None`` uses five scales when the image allows it and otherwise as
    many as fit; the leading weights are then renormalised to sum to one.
    """
    x, y = _img(x), _img(y)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    fit = max_scales(x.shape)
    if scales is None:
        scales = fit
    if scales < 1 or scales > len(MS_SSIM_WEIGHTS) or scales > fit:
        raise ValueError(f"{x.shape[0]}x{x.shape[1]} image too small for {scales} scales (max {fit})")
    weights = np.array(MS_SSIM_WEIGHTS[:scales])
    weights = weights / weights.sum()
    value = 1.0
    for j in range(scales):
        s, cs = _ssim_parts(x, y)
        term = s if j == scales - 1 else cs
        value *= max(term, 0.0) ** weights[j]
        x, y = _avg_pool2(x), _avg_pool2(y)
    return float(value)


def fusion_ms_ssim(I1, I2, If, scales: Optional[int] = None) -> float:
    a, b, f = _triple(I1, I2, If)
    return 0.5 * (ms_ssim(a, f, scales) + ms_ssim(b, f, scales))


# --------------------------------------------------------------------------- SCD

def _corr(a: np.ndarray, b: np.ndarray) -> Optional[float]:
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float(np.sum(a * a)) * float(np.sum(b * b)))
    if den <= _EPS * a.size:
        return None
    return float(np.sum(a * b)) / den


def scd_terms(I1, I2, If) -> tuple[float, bool]:
    """Sum of correlations between each difference image and the other source."""
    a, b, f = _triple(I1, I2, If)
    total, degenerate = 0.0, False
    for diff, src in ((f - b, a), (f - a, b)):
        r = _corr(diff, src)
        if r is None:
            degenerate = True
        else:
            total += r
    return total, degenerate


def scd(I1, I2, If) -> float:
    return scd_terms(I1, I2, If)[0]


# --------------------------------------------------------------------------- Q^AB/F

def edge_strength_orientation(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gx, gy = sobel_components(img)
    g = np.sqrt(gx * gx + gy * gy)
    alpha = np.arctan2(gy, gx)
    # fold into [-pi/2, pi/2], matching arctan(gy / gx)
    alpha = np.where(alpha > np.pi / 2, alpha - np.pi, alpha)
    alpha = np.where(alpha < -np.pi / 2, alpha + np.pi, alpha)
    return g, alpha


def _edge_preservation(gS, aS, gF, aF) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        G = np.where(gS > gF, gF / np.where(gS > 0, gS, 1.0), gS / np.where(gF > 0, gF, 1.0))
    G = np.where((gS == 0) & (gF == 0), 0.0, G)
    # edge orientations are lines, so compare them modulo pi
    d = np.abs(aS - aF)
    A = 1.0 - np.minimum(d, np.pi - d) / (np.pi / 2)
    tg, kg, sg = QABF_G
    ta, ka, sa = QABF_A
    Qg = tg / (1.0 + np.exp(kg * (G - sg)))
    Qa = ta / (1.0 + np.exp(ka * (A - sa)))
    return Qg * Qa


def qabf(I1, I2, If) -> float:
    """Edge-preservation score weighted by source edge strength."""
    a, b, f = _triple(I1, I2, If)
    gA, aA = edge_strength_orientation(a)
    gB, aB = edge_strength_orientation(b)
    gF, aF = edge_strength_orientation(f)
    num = np.sum(_edge_preservation(gA, aA, gF, aF) * gA + _edge_preservation(gB, aB, gF, aF) * gB)
    den = np.sum(gA + gB)
    return float(num / den) if den > 0 else 0.0


# --------------------------------------------------------------------------- FMI

def _bin(x: np.ndarray, bins: int) -> np.ndarray:
    lo, hi = float(x.min()), float(x.max())
    if hi <= lo:
        return np.zeros(x.shape, dtype=np.intp)
    idx = np.floor((x - lo) / (hi - lo) * bins).astype(np.intp)
    return np.minimum(idx, bins - 1)


def _entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-np.sum(p * np.log2(p)))


def normalized_mutual_information(a: np.ndarray, f: np.ndarray, bins: int = FMI_BINS) -> float:
    """``2 MI / (H(a) + H(f))`` from a joint histogram; 0 when either entropy vanishes."""
    ia, jf = _bin(a, bins).ravel(), _bin(f, bins).ravel()
    joint = np.bincount(ia * bins + jf, minlength=bins * bins).astype(np.float64) / ia.size
    pa = np.bincount(ia, minlength=bins) / ia.size
    pf = np.bincount(jf, minlength=bins) / jf.size
    ha, hf = _entropy(pa), _entropy(pf)
    if ha <= 0 or hf <= 0:
        return 0.0
    mi = ha + hf - _entropy(joint)
    return 2.0 * mi / (ha + hf)


def gradient_feature(img: np.ndarray) -> np.ndarray:
    gx, gy = sobel_components(img)
    return np.sqrt(gx * gx + gy * gy)


def fmi(I1, I2, If) -> float:
    """Mean normalised mutual information between Sobel-magnitude feature images."""
    a, b, f = _triple(I1, I2, If)
    fa, fb, ff = gradient_feature(a), gradient_feature(b), gradient_feature(f)
    return 0.5 * (normalized_mutual_information(fa, ff) + normalized_mutual_information(fb, ff))


# --------------------------------------------------------------------------- VIF

def _vif_window(scale: int) -> np.ndarray:
    n = 2 ** (VIF_SCALES - scale) + 1
    r = np.arange(n) - (n - 1) / 2
    g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2 * (n / 5.0) ** 2))
    return g / g.sum()


def vif_single(ref, dist) -> tuple[float, int]:
    """Pixel-domain VIF of ``dist`` against ``ref`` on a 0-255 intensity scale.

    Returns the ratio and the number of scales that contributed.
    """
    ref = _img(ref) * 255.0
    dist = _img(dist) * 255.0
    num = den = 0.0
    used = 0
    for scale in range(VIF_SCALES):
        win = _vif_window(scale)
        if scale > 0:
            ref = filter_valid(ref, win)[::2, ::2]
            dist = filter_valid(dist, win)[::2, ::2]
        mu1, mu2 = filter_valid(ref, win), filter_valid(dist, win)
        if mu1.size == 0:
            continue
        s1 = np.maximum(filter_valid(ref * ref, win) - mu1 * mu1, 0.0)
        s2 = np.maximum(filter_valid(dist * dist, win) - mu2 * mu2, 0.0)
        s12 = filter_valid(ref * dist, win) - mu1 * mu2
        g = s12 / (s1 + _EPS)
        sv = s2 - g * s12
        low1 = s1 < _EPS
        g = np.where(low1, 0.0, g)
        sv = np.where(low1, s2, sv)
        s1 = np.where(low1, 0.0, s1)
        low2 = s2 < _EPS
        g = np.where(low2, 0.0, g)
        sv = np.where(low2, 0.0, sv)
        neg = g < 0
        sv = np.where(neg, s2, sv)
        g = np.where(neg, 0.0, g)
        sv = np.maximum(sv, _EPS)
        scale_den = float(np.sum(np.log10(1.0 + s1 / VIF_NOISE_VAR)))
        if scale_den <= 0:
            continue
        num += float(np.sum(np.log10(1.0 + g * g * s1 / (sv + VIF_NOISE_VAR))))
        den += scale_den
        used += 1
    return (num / den if den > 0 else 0.0), used


def vif(I1, I2, If) -> float:
    """Mean of the source-to-fused VIF ratios."""
    a, b, f = _triple(I1, I2, If)
    if min(a.shape) < 32:
        raise ValueError(f"VIF needs images of at least 32x32, got {a.shape}")
    return 0.5 * (vif_single(a, f)[0] + vif_single(b, f)[0])


# --------------------------------------------------------------------------- report

METRIC_NAMES = ("vif", "scd", "qabf", "msssim", "fmi")


@dataclass
class MetricRow:
    pair: str
    vif: float
    scd: float
    qabf: float
    msssim: float
    fmi: float
    flags: list[str] = field(default_factory=list)

    def values(self) -> list[float]:
        return [getattr(self, n) for n in METRIC_NAMES]


@dataclass
class FusionReport:
    rows: list[MetricRow]

    @property
    def means(self) -> dict[str, float]:
        return {n: float(np.mean([getattr(r, n) for r in self.rows])) for n in METRIC_NAMES}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("pair",) + METRIC_NAMES)
            for r in self.rows:
                w.writerow([r.pair] + [repr(v) for v in r.values()])
            w.writerow(["mean"] + [repr(v) for v in self.means.values()])

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for r in self.rows:
                fh.write(json.dumps(asdict(r)) + "\n")
            fh.write(json.dumps({"pair": "mean", **self.means}) + "\n")


def evaluate_pair(I1, I2, If, pair: str = "0") -> MetricRow:
    a, b, f = _triple(I1, I2, If)
    flags = []
    s, degenerate = scd_terms(a, b, f)
    if degenerate:
        flags.append("scd-degenerate")
    v_a, used_a = vif_single(a, f)
    v_b, used_b = vif_single(b, f)
    if min(used_a, used_b) < VIF_SCALES:
        flags.append("vif-scales-skipped")
    return MetricRow(pair, 0.5 * (v_a + v_b), s, qabf(a, b, f), fusion_ms_ssim(a, b, f), fmi(a, b, f), flags)


def evaluate_all(pairs: Iterable, ids: Optional[Sequence[str]] = None) -> FusionReport:
    """Score ``(I1, I2, If)`` triples in input order."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("evaluate_all needs at least one (I1, I2, If) triple")
    ids = [str(i) for i in range(len(pairs))] if ids is None else list(ids)
    rows = []
    for pid, (a, b, f) in zip(ids, pairs):
        try:
            rows.append(evaluate_pair(a, b, f, pid))
        except ValueError as exc:
            raise ValueError(f"pair {pid}: {exc}") from exc
    return FusionReport(rows)
