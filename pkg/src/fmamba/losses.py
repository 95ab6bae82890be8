"""Training objective: intensity, texture and structure terms and their weighted sum."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .tape import Tensor, as_tensor

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


@dataclass(frozen=True)
class LossWeights:
    alpha1: float = 100.0
    alpha2: float = 10.0
    alpha3: float = 1.0

    def __post_init__(self):
        if min(self.alpha1, self.alpha2, self.alpha3) < 0:
            raise ValueError("loss weights must be nonnegative")

    @classmethod
    def parse(cls, text: str) -> "LossWeights":
        parts = [float(v) for v in text.split(",")]
        if len(parts) != 3:
            raise ValueError(f"expected three comma-separated weights, got {text!r}")
        return cls(*parts)


DEFAULT_WEIGHTS = LossWeights()
#: best-balanced setting of the weight ablation grid
GRID_BEST_WEIGHTS = LossWeights(20.0, 10.0, 10.0)


def _same_shape(*images) -> tuple[Tensor, ...]:
    ts = tuple(as_tensor(i) for i in images)
    if len({t.shape for t in ts}) != 1:
        raise ValueError(f"image shapes differ: {[t.shape for t in ts]}")
    if ts[0].ndim != 2:
        raise ValueError(f"expected [H, W] images, got {ts[0].shape}")
    return ts


def texture_loss(I1, I2, If) -> Tensor:
    """Mean absolute gap between the fused gradient and the stronger source gradient."""
    I1, I2, If = _same_shape(I1, I2, If)
    target = nx.maximum(nx.sobel_gradient(I1), nx.sobel_gradient(I2))
    return nx.mean(nx.abs_(nx.sub(nx.sobel_gradient(If), target)))


def intensity_loss(I1, I2, If) -> Tensor:
    """Mean squared deviation of the fused image from the pixelwise source maximum."""
    I1, I2, If = _same_shape(I1, I2, If)
    return nx.mean(nx.square(nx.sub(If, nx.maximum(I1, I2))))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(x, y, data_range: float = 1.0) -> Tensor:
    """Mean SSIM over all valid 11x11 Gaussian windows (sigma 1.5)."""
    x, y = _same_shape(x, y)
    H, W = x.shape
    if H < SSIM_WINDOW or W < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {H}x{W}")
    kernel = nx.ConvKernel(gaussian_window()[:, :, None, None])
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    def blur(t):
        return nx.conv2d(nx.reshape(t, (H, W, 1)), kernel, "valid")

    mx, my = blur(x), blur(y)
    mxx, myy, mxy = nx.mul(mx, mx), nx.mul(my, my), nx.mul(mx, my)
    sxx = nx.sub(blur(nx.mul(x, x)), mxx)
    syy = nx.sub(blur(nx.mul(y, y)), myy)
    sxy = nx.sub(blur(nx.mul(x, y)), mxy)
    num = nx.mul(nx.add(nx.mul(mxy, 2.0), c1), nx.add(nx.mul(sxy, 2.0), c2))
    den = nx.mul(nx.add(nx.add(mxx, myy), c1), nx.add(nx.add(sxx, syy), c2))
    return nx.mean(nx.div(num, den))


def ssim_loss(I1, I2, If) -> Tensor:
    I1, I2, If = _same_shape(I1, I2, If)
    return nx.add(nx.mul(nx.sub(1.0, ssim(I1, If)), 0.5), nx.mul(nx.sub(1.0, ssim(I2, If)), 0.5))


def total_loss(I1, I2, If, w: LossWeights = DEFAULT_WEIGHTS) -> tuple[Tensor, dict[str, float]]:
    """Weighted objective and its per-term breakdown."""
    l_int = intensity_loss(I1, I2, If)
    l_text = texture_loss(I1, I2, If)
    l_ssim = ssim_loss(I1, I2, If)
    total = nx.add(nx.add(nx.mul(l_int, w.alpha1), nx.mul(l_text, w.alpha2)), nx.mul(l_ssim, w.alpha3))
    breakdown = {"int": l_int.item(), "text": l_text.item(), "ssim": l_ssim.item(), "total": total.item()}
    return total, breakdown


def combine(terms: tuple[float, float, float], w: LossWeights) -> float:
    """Weighted sum of already-evaluated ``(int, text, ssim)`` terms."""
    return w.alpha1 * terms[0] + w.alpha2 * terms[1] + w.alpha3 * terms[2]
