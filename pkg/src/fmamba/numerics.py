"""Tensor primitives: elementwise math, convolutions, linear maps, norms, patch resampling.

Feature maps are ``[H, W, C]``, images ``[H, W]``; all values are float64.
Each primitive returns a :class:`~fmamba.tape.Tensor` and, when recorded,
carries a hand-written vector-Jacobian product.
"""
from __future__ import annotations

import contextlib
from collections import defaultdict
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tape import Tensor, active_tape, as_tensor, primitive, record, unbroadcast

__all__ = [
    "Tensor", "ConvKernel", "add", "sub", "mul", "div", "neg", "exp", "log", "square",
    "abs_", "maximum", "sigmoid", "silu", "softplus", "pointwise_activation",
    "sum_", "mean", "reshape", "transpose", "take", "concat", "stack",
    "conv2d", "depthwise_conv2d", "linear", "layer_norm", "global_avg_pool",
    "channel_conv1d", "sobel_gradient", "patch_embed", "patch_merge", "patch_expand", "final_expand",
    "FlopCounter", "count_flops_into",
]


# --------------------------------------------------------------------------- flops

class FlopCounter:
    """Accumulates multiply-accumulate counts (x2) per scope and category."""

    def __init__(self):
        self.by_scope: dict[str, int] = defaultdict(int)
        self.by_kind: dict[str, int] = defaultdict(int)
        self._scopes: list[str] = []

    @property
    def total(self) -> int:
        return sum(self.by_kind.values())

    @contextlib.contextmanager
    def scope(self, name: str):
        self._scopes.append(name)
        try:
            yield
        finally:
            self._scopes.pop()

    def add(self, kind: str, flops: int) -> None:
        self.by_kind[kind] += int(flops)
        self.by_scope[self._scopes[0] if self._scopes else "<root>"] += int(flops)


_COUNTERS: list[FlopCounter] = []


@contextlib.contextmanager
def count_flops_into(counter: FlopCounter):
    _COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _COUNTERS.remove(counter)


@contextlib.contextmanager
def flop_scope(name: str):
    if not _COUNTERS:
        yield
        return
    with contextlib.ExitStack() as stack:
        for c in _COUNTERS:
            stack.enter_context(c.scope(name))
        yield


def _count(kind: str, flops: int) -> None:
    for c in _COUNTERS:
        c.add(kind, flops)


# --------------------------------------------------------------------------- elementwise

def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


@primitive
def add(a, b) -> Tensor:
    da, db = _data(a), _data(b)
    return record("add", da + db, (a, b),
                  lambda g: (unbroadcast(g, da.shape), unbroadcast(g, db.shape)))


@primitive
def sub(a, b) -> Tensor:
    da, db = _data(a), _data(b)
    return record("sub", da - db, (a, b),
                  lambda g: (unbroadcast(g, da.shape), unbroadcast(-g, db.shape)))


@primitive
def mul(a, b) -> Tensor:
    da, db = _data(a), _data(b)
    return record("mul", da * db, (a, b),
                  lambda g: (unbroadcast(g * db, da.shape), unbroadcast(g * da, db.shape)))


@primitive
def div(a, b) -> Tensor:
    da, db = _data(a), _data(b)
    out = da / db
    return record("div", out, (a, b),
                  lambda g: (unbroadcast(g / db, da.shape), unbroadcast(-g * out / db, db.shape)))


@primitive
def neg(a) -> Tensor:
    return record("neg", -_data(a), (a,), lambda g: (-g,))


@primitive
def exp(a) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(_data(a))
    return record("exp", out, (a,), lambda g: (g * out,))


@primitive
def log(a) -> Tensor:
    da = _data(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(da)
    return record("log", out, (a,), lambda g: (g / da,))


@primitive
def square(a) -> Tensor:
    da = _data(a)
    return record("square", da * da, (a,), lambda g: (2.0 * g * da,))


@primitive
def abs_(a) -> Tensor:
    da = _data(a)
    tape = active_tape()
    if tape is not None and tape.tracks(a) and da.size:
        tape.note_kink(np.abs(da).min())
    # tie at zero sends the gradient through the positive branch
    sign = np.where(da >= 0, 1.0, -1.0)
    return record("abs_", np.abs(da), (a,), lambda g: (g * sign,))


@primitive
def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the gradient to ``a``."""
    da, db = _data(a), _data(b)
    tape = active_tape()
    if tape is not None and (tape.tracks(a) or tape.tracks(b)):
        diff = np.abs(da - db)
        if diff.size:
            tape.note_kink(diff.min())
    first = da >= db
    return record("maximum", np.where(first, da, db), (a, b),
                  lambda g: (unbroadcast(np.where(first, g, 0.0), da.shape),
                             unbroadcast(np.where(first, 0.0, g), db.shape)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@primitive
def sigmoid(a) -> Tensor:
    s = _sigmoid(_data(a))
    return record("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


@primitive
def silu(a) -> Tensor:
    da = _data(a)
    s = _sigmoid(da)
    return record("silu", da * s, (a,), lambda g: (g * (s + da * s * (1.0 - s)),))


@primitive
def softplus(a) -> Tensor:
    da = _data(a)
    return record("softplus", np.logaddexp(0.0, da), (a,), lambda g: (g * _sigmoid(da),))


def pointwise_activation(x, kind: str) -> Tensor:
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "silu":
        return silu(x)
    raise ValueError(f"unknown activation {kind!r}")


# --------------------------------------------------------------------------- reductions & shape

@primitive
def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    da = _data(a)
    out = np.sum(da, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, da.shape).copy(),)

    return record("sum_", out, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    da = _data(a)
    n = da.size if axis is None else np.prod([da.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


@primitive
def reshape(a, shape: Sequence[int]) -> Tensor:
    da = _data(a)
    return record("reshape", da.reshape(shape), (a,), lambda g: (g.reshape(da.shape),))


@primitive
def transpose(a, axes: Optional[Sequence[int]] = None) -> Tensor:
    da = _data(a)
    axes = tuple(reversed(range(da.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return record("transpose", np.transpose(da, axes), (a,), lambda g: (np.transpose(g, inv),))


@primitive
def take(a, index: np.ndarray, axis: int = 0) -> Tensor:
    """Gather along ``axis``; the backward scatters (with accumulation)."""
    da = _data(a)
    index = np.asarray(index, dtype=np.intp)

    def vjp(g):
        out = np.zeros_like(da)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0))
        return (out,)

    return record("take", np.take(da, index, axis=axis), (a,), vjp)


@primitive
def concat(parts: Sequence, axis: int = 0) -> Tensor:
    datas = [_data(p) for p in parts]
    bounds = np.cumsum([d.shape[axis] for d in datas])[:-1]
    return record("concat", np.concatenate(datas, axis=axis), tuple(parts),
                  lambda g: tuple(np.split(g, bounds, axis=axis)))


@primitive
def stack(parts: Sequence, axis: int = 0) -> Tensor:
    datas = [_data(p) for p in parts]
    return record("stack", np.stack(datas, axis=axis), tuple(parts),
                  lambda g: tuple(np.moveaxis(g, axis, 0)))


# --------------------------------------------------------------------------- convolution

class ConvKernel:
    """Dense convolution weights ``[k_h, k_w, c_in, c_out]`` with optional bias."""

    def __init__(self, weights, bias=None):
        w = as_tensor(weights)
        if w.ndim != 4:
            raise ValueError(f"kernel must be [k_h, k_w, c_in, c_out], got {w.shape}")
        kh, kw, cin, cout = w.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"kernel extents must be odd, got {kh}x{kw}")
        if cin < 1 or cout < 1:
            raise ValueError("kernel channel counts must be >= 1")
        if bias is not None and as_tensor(bias).shape != (cout,):
            raise ValueError(f"bias must have shape ({cout},)")
        self.weights = w
        self.bias = None if bias is None else as_tensor(bias)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.weights.shape


def _pad_hw(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    return np.pad(x, ((ph, ph), (pw, pw), (0, 0)))


@primitive
def _conv2d(x, w, padding: str) -> Tensor:
    dx, dw = _data(x), _data(w)
    kh, kw, cin, cout = dw.shape
    ph, pw = (kh // 2, kw // 2) if padding == "same" else (0, 0)
    xp = _pad_hw(dx, ph, pw)
    win = sliding_window_view(xp, (kh, kw), axis=(0, 1))  # [H', W', Cin, kh, kw]
    out = np.einsum("hwcij,ijco->hwo", win, dw, optimize=True)
    _count("conv", 2 * kh * kw * cin * cout * out.shape[0] * out.shape[1])

    def vjp(g):
        gw = np.einsum("hwcij,hwo->ijco", win, g, optimize=True)
        # input gradient: full correlation of g with the flipped kernel
        gp = np.pad(g, ((kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0)))
        gwin = sliding_window_view(gp, (kh, kw), axis=(0, 1))
        gxp = np.einsum("hwoij,ijco->hwc", gwin, dw[::-1, ::-1], optimize=True)
        gx = gxp[ph:ph + dx.shape[0], pw:pw + dx.shape[1]]
        return gx, gw

    return record("conv2d", out, (x, w), vjp)


def conv2d(x, kernel: ConvKernel, padding: str = "same") -> Tensor:
    """2-D cross-correlation over ``[H, W, Cin]`` with zero padding."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise ValueError(f"conv2d expects [H, W, C] input, got {x.shape}")
    if padding not in ("same", "valid"):
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    kh, kw, cin, _ = kernel.shape
    if x.shape[2] != cin:
        raise ValueError(f"channel mismatch: input has {x.shape[2]}, kernel expects {cin}")
    if padding == "valid" and (x.shape[0] < kh or x.shape[1] < kw):
        raise ValueError("input smaller than kernel for valid convolution")
    out = _conv2d(x, kernel.weights, padding)
    if kernel.bias is not None:
        out = add(out, kernel.bias)
    return out


@primitive
def depthwise_conv2d(x, w) -> Tensor:
    """Per-channel ``k x k`` convolution, same zero padding. ``w`` is ``[k, k, C]``."""
    dx, dw = _data(x), _data(w)
    if dx.ndim != 3 or dw.ndim != 3:
        raise ValueError("depthwise_conv2d expects [H, W, C] input and [k, k, C] kernel")
    if dw.shape[2] != dx.shape[2]:
        raise ValueError(f"channel mismatch: input has {dx.shape[2]}, kernel has {dw.shape[2]}")
    kh, kw, _ = dw.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("kernel extents must be odd")
    H, W, C = dx.shape
    ph, pw = kh // 2, kw // 2
    xp = _pad_hw(dx, ph, pw)
    out = np.zeros_like(dx)
    for i in range(kh):
        for j in range(kw):
            out += xp[i:i + H, j:j + W] * dw[i, j]
    _count("conv", 2 * kh * kw * C * H * W)

    def vjp(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(dw)
        for i in range(kh):
            for j in range(kw):
                gxp[i:i + H, j:j + W] += g * dw[i, j]
                gw[i, j] = np.einsum("hwc,hwc->c", xp[i:i + H, j:j + W], g)
        return gxp[ph:ph + H, pw:pw + W], gw

    return record("depthwise_conv2d", out, (x, w), vjp)


@primitive
def _matmul_last(x, w) -> Tensor:
    dx, dw = _data(x), _data(w)
    out = dx @ dw
    _count("linear", 2 * (dx.size // dw.shape[0]) * dw.shape[0] * dw.shape[1])

    def vjp(g):
        gx = g @ dw.T
        gw = dx.reshape(-1, dw.shape[0]).T @ g.reshape(-1, dw.shape[1])
        return gx, gw

    return record("linear", out, (x, w), vjp)


def linear(x, weight, bias=None) -> Tensor:
    """Affine map of the last axis: ``x @ weight + bias``; weight is ``[Cin, Cout]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ValueError(f"dimension mismatch: input {x.shape} vs weight {weight.shape}")
    out = _matmul_last(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


@primitive
def layer_norm(x, gain, shift, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit (biased) variance, then scale and shift."""
    dx, dg, ds = _data(x), _data(gain), _data(shift)
    mu = dx.mean(axis=-1, keepdims=True)
    xc = dx - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * dg + ds

    def vjp(g):
        gxhat = g * dg
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(dx.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return record("layer_norm", out, (x, gain, shift), vjp)


def global_avg_pool(x) -> Tensor:
    """Spatial mean of ``[H, W, C]`` -> ``[1, 1, C]``."""
    return mean(x, axis=(0, 1), keepdims=True)


@primitive
def channel_conv1d(v, w) -> Tensor:
    """1-D zero-padded cross-correlation along a channel vector ``[C]`` with odd kernel ``[k]``."""
    dv, dw = _data(v), _data(w)
    k = dw.shape[0]
    if k % 2 == 0:
        raise ValueError("channel kernel size must be odd")
    p = k // 2
    vp = np.pad(dv, (p, p))
    win = sliding_window_view(vp, k)  # [C, k]
    out = win @ dw

    def vjp(g):
        gvp = np.zeros_like(vp)
        for j in range(k):
            gvp[j:j + dv.shape[0]] += g * dw[j]
        return gvp[p:p + dv.shape[0]], win.T @ g

    return record("channel_conv1d", out, (v, w), vjp)


_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T.copy()


def sobel_gradient(image) -> Tensor:
    """``|G_x| + |G_y|`` of a single-channel ``[H, W]`` image (same zero padding)."""
    image = as_tensor(image)
    if image.ndim != 2:
        raise ValueError(f"sobel_gradient expects [H, W], got {image.shape}")
    x = reshape(image, image.shape + (1,))
    k = np.stack([_SOBEL_X, _SOBEL_Y], axis=-1)[:, :, None, :]  # [3,3,1,2]
    g = conv2d(x, ConvKernel(k), "same")
    return sum_(abs_(g), axis=2)


# --------------------------------------------------------------------------- patch resampling

def patch_embed(image, weight, bias=None, patch: int = 4) -> Tensor:
    """Split ``[H, W]`` or ``[H, W, 1]`` into ``patch x patch`` tiles and project each to C channels."""
    image = as_tensor(image)
    if image.ndim == 3:
        if image.shape[2] != 1:
            raise ValueError("patch_embed expects a single-channel image")
        image = reshape(image, image.shape[:2])
    H, W = image.shape
    if H % patch or W % patch:
        raise ValueError(f"image extents {H}x{W} not divisible by patch size {patch}")
    tiles = reshape(image, (H // patch, patch, W // patch, patch))
    tiles = transpose(tiles, (0, 2, 1, 3))
    tiles = reshape(tiles, (H // patch, W // patch, patch * patch))
    return linear(tiles, weight, bias)


def merge_gather(x) -> Tensor:
    """Concatenate each 2x2 neighbourhood as (top-left, top-right, bottom-left, bottom-right)."""
    x = as_tensor(x)
    H, W, C = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"patch_merge needs even extents, got {H}x{W}")
    t = reshape(x, (H // 2, 2, W // 2, 2 * C))  # last axis: (col parity, C)
    t = transpose(t, (0, 2, 1, 3))              # [H/2, W/2, row parity, 2C]
    return reshape(t, (H // 2, W // 2, 4 * C))


def patch_merge(x, weight, bias=None) -> Tensor:
    """``[H, W, C] -> [H/2, W/2, 2C]`` via 2x2 concatenation and a 4C->2C linear map."""
    return linear(merge_gather(x), weight, bias)


def pixel_shuffle(x, factor: int) -> Tensor:
    """Rearrange ``[H, W, f*f*D]`` into ``[f*H, f*W, D]``.

    Channel blocks are laid out row-parity major, then column parity, so for
    ``f = 2`` this is the exact inverse of :func:`merge_gather`.
    """
    x = as_tensor(x)
    H, W, C = x.shape
    if C % (factor * factor):
        raise ValueError(f"{C} channels cannot fill {factor}x{factor} blocks")
    D = C // (factor * factor)
    t = reshape(x, (H, W, factor, factor * D))
    t = transpose(t, (0, 2, 1, 3))
    return reshape(t, (factor * H, factor * W, D))


def expand_scatter(x) -> Tensor:
    """Rearrange ``[H, W, 4D]`` into ``[2H, 2W, D]``; inverse of :func:`merge_gather`."""
    return pixel_shuffle(x, 2)


def final_expand(x, weight, bias=None, factor: int = 4) -> Tensor:
    """``[H, W, C] -> [f*H, f*W, C]``: linear C -> f*f*C, then spread over f x f blocks."""
    return pixel_shuffle(linear(x, weight, bias), factor)


def patch_expand(x, weight, bias=None) -> Tensor:
    """``[H, W, C] -> [2H, 2W, C/2]``: linear C->2C, then spread the 2C channels over a 2x2 block."""
    x = as_tensor(x)
    C = x.shape[-1]
    if C % 2:
        raise ValueError(f"patch_expand needs an even channel count, got {C}")
    return expand_scatter(linear(x, weight, bias))
