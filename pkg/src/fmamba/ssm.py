"""State-space kernels: zero-order-hold discretisation, recurrent and convolutional
evaluation, input-dependent (selective) parameters and the skip-sampled 2-D scan.

Shapes follow the per-token convention ``[..., L, C]`` for sequences and
``[..., L, C, N]`` for discretised state parameters; ``...`` is an optional
batch of independent sequences scanned side by side.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .init import trunc_normal
from .tape import Tensor, as_tensor, primitive, record

SERIES_THRESHOLD = 1e-8
_DPHI_SERIES = 1e-3

#: per-offset scan direction of the skip-sampled layout
DIRECTIONS = ("row", "row_rev", "col", "col_rev")
OFFSETS = ((0, 0), (0, 1), (1, 0), (1, 1))


@dataclass
class DiscreteSsm:
    A_bar: Tensor
    B_bar: Tensor


def _phi(x: np.ndarray, delta: np.ndarray, a: np.ndarray) -> np.ndarray:
    """``(exp(delta*a) - 1) / a`` with a two-term series below the switch."""
    small = np.abs(x) < SERIES_THRESHOLD
    safe_a = np.where(small, 1.0, a)
    return np.where(small, delta * (1.0 + 0.5 * x), np.expm1(x) / safe_a)


def _dphi_da(x: np.ndarray, delta: np.ndarray, a: np.ndarray) -> np.ndarray:
    small = np.abs(x) < _DPHI_SERIES
    safe_a = np.where(small, 1.0, a)
    exact = (x * np.exp(x) - np.expm1(x)) / (safe_a * safe_a)
    series = delta * delta * (0.5 + x / 3.0 + x * x / 8.0 + x ** 3 / 30.0 + x ** 4 / 144.0)
    return np.where(small, series, exact)


@primitive
def zoh_discretize(A, delta, B) -> DiscreteSsm:
    """Zero-order hold for a diagonal state matrix.

    ``A`` is ``[C, N]``, ``delta`` is ``[..., L, C]`` and ``B`` is ``[..., L, N]``.
    Returns ``A_bar = exp(delta*a)`` and ``B_bar = (exp(delta*a) - 1)/a * b``,
    both ``[..., L, C, N]``.
    """
    dA, dd, dB = nx._data(A), nx._data(delta), nx._data(B)
    if np.any(dd <= 0):
        raise ValueError("zoh_discretize requires strictly positive delta")
    if dA.ndim != 2 or dd.shape[-1] != dA.shape[0] or dB.shape[-1] != dA.shape[1]:
        raise ValueError(f"shape mismatch: A {dA.shape}, delta {dd.shape}, B {dB.shape}")
    d = dd[..., None]                  # [..., L, C, 1]
    b = dB[..., None, :]               # [..., L, 1, N]
    x = d * dA
    A_bar = np.exp(x)
    phi = _phi(x, d, dA)
    B_bar = phi * b

    lead = tuple(range(dd.ndim - 1))

    def vjp_a(g):
        gA = g * A_bar
        return (gA * d).sum(axis=lead), (gA * dA).sum(axis=-1), None

    def vjp_b(g):
        gphi = g * b
        gA = (gphi * _dphi_da(x, d, dA)).sum(axis=lead)
        gd = (gphi * A_bar).sum(axis=-1)      # d phi / d delta = exp(delta*a)
        gB = (g * phi).sum(axis=-2)
        return gA, gd, gB

    return DiscreteSsm(record("zoh_A_bar", A_bar, (A, delta, B), vjp_a),
                       record("zoh_B_bar", B_bar, (A, delta, B), vjp_b))


@primitive
def ssm_scan_recurrent(A_bar, B_bar, C_t, D, x) -> Tensor:
    """``h_k = A_k h_{k-1} + B_k x_k``, ``y_k = C_k . h_k + D x_k`` with ``h_0 = 0``.

    ``A_bar``/``B_bar``: ``[..., L, C, N]``; ``C_t``: ``[..., L, N]``; ``D``: ``[C]``;
    ``x``: ``[..., L, C]``.
    """
    dA, dB, dC, dD, dx = (nx._data(t) for t in (A_bar, B_bar, C_t, D, x))
    if dA.shape != dB.shape or dA.shape[:-1] != dx.shape or dC.shape != dx.shape[:-1] + dA.shape[-1:] \
            or dD.shape != dx.shape[-1:]:
        raise ValueError(f"extent mismatch: A_bar {dA.shape}, B_bar {dB.shape}, C {dC.shape}, "
                         f"D {dD.shape}, x {dx.shape}")
    L = dx.shape[-2]
    bx = dB * dx[..., None]
    hs = np.empty_like(dA)
    h = np.zeros(dA.shape[:-3] + dA.shape[-2:])
    for k in range(L):
        h = dA[..., k, :, :] * h + bx[..., k, :, :]
        hs[..., k, :, :] = h
    y = np.einsum("...lcn,...ln->...lc", hs, dC) + dD * dx
    nx._count("scan", 6 * dA.shape[-1] * dx.size)

    def vjp(gy):
        gC = np.einsum("...lc,...lcn->...ln", gy, hs)
        gD = (gy * dx).reshape(-1, dx.shape[-1]).sum(axis=0)
        gh_out = gy[..., None] * dC[..., None, :]
        ghs = np.empty_like(hs)
        gh = np.zeros_like(h)
        for k in range(L - 1, -1, -1):
            gh = gh_out[..., k, :, :] + (dA[..., k + 1, :, :] * gh if k + 1 < L else 0.0)
            ghs[..., k, :, :] = gh
        h_prev = np.zeros_like(hs)
        h_prev[..., 1:, :, :] = hs[..., :-1, :, :]
        gA = ghs * h_prev
        gB = ghs * dx[..., None]
        gx = (ghs * dB).sum(axis=-1) + gy * dD
        return gA, gB, gC, gD, gx

    return record("ssm_scan_recurrent", y, (A_bar, B_bar, C_t, D, x), vjp)


def ssm_kernel(disc: DiscreteSsm, C_row, L: int) -> np.ndarray:
    """Convolution kernel ``(C B, C A B, ..., C A^{L-1} B)`` of a time-invariant SSM.

    ``disc`` holds per-token ``[L', C, N]`` parameters; all tokens must agree.
    ``C_row`` is ``[N]``. Returns ``[L, C]``.
    """
    A_bar, B_bar = nx._data(disc.A_bar), nx._data(disc.B_bar)
    C_row = np.asarray(nx._data(C_row))
    if A_bar.ndim == 3:
        if not (np.all(A_bar == A_bar[:1]) and np.all(B_bar == B_bar[:1])):
            raise ValueError("ssm_kernel requires time-invariant parameters")
        A_bar, B_bar = A_bar[0], B_bar[0]
    K = np.empty((L,) + A_bar.shape[:-1])
    power = np.ones_like(A_bar)
    for k in range(L):
        K[k] = (power * B_bar) @ C_row
        power = power * A_bar
    return K


def ssm_apply_conv_form(x, K_bar, D) -> np.ndarray:
    """Causal convolution ``y_k = sum_{j<=k} K_{k-j} x_j + D x_k`` (per channel)."""
    x = np.asarray(nx._data(x))
    K = np.asarray(nx._data(K_bar))
    squeeze = x.ndim == 1
    if squeeze:
        x, K = x[:, None], K[:, None]
    L = x.shape[0]
    y = np.zeros_like(x)
    for k in range(L):
        # K_{k-j} for j = 0..k
        y[k] = np.einsum("jc,jc->c", K[k::-1][: k + 1], x[: k + 1])
    y = y + np.asarray(nx._data(D)) * x
    return y[:, 0] if squeeze else y


def selective_params(tokens, p: Mapping[str, Tensor]):
    """Input-dependent ``(delta, B, C)``; delta is positive via softplus."""
    low = nx.linear(tokens, p["delta_down.weight"])
    delta = nx.softplus(nx.linear(low, p["delta_proj.weight"], p["delta_proj.bias"]))
    B = nx.linear(tokens, p["B_proj.weight"])
    C = nx.linear(tokens, p["C_proj.weight"])
    return delta, B, C


def ssm_A(p: Mapping[str, Tensor]) -> Tensor:
    """Diagonal state matrix, kept negative through ``A = -exp(A_log)``."""
    return nx.neg(nx.exp(p["A_log"]))


def selective_scan(tokens, p: Mapping[str, Tensor]) -> Tensor:
    """Selective SSM over ``[..., L, C]`` tokens."""
    delta, B, C = selective_params(tokens, p)
    disc = zoh_discretize(ssm_A(p), delta, B)
    return ssm_scan_recurrent(disc.A_bar, disc.B_bar, C, p["D"], tokens)


def delta_rank(channels: int) -> int:
    return -(-channels // 16)


def init_ssm_params(rng: np.random.Generator, channels: int, state_size: int, std: float = 0.02) -> dict:
    rank = delta_rank(channels)
    return {
        "A_log": np.log(np.tile(np.arange(1, state_size + 1, dtype=np.float64), (channels, 1))),
        "D": np.ones(channels),
        "delta_down.weight": trunc_normal(rng, (channels, rank), std),
        "delta_proj.weight": trunc_normal(rng, (rank, channels), std),
        "delta_proj.bias": np.zeros(channels),
        "B_proj.weight": trunc_normal(rng, (channels, state_size), std),
        "C_proj.weight": trunc_normal(rng, (channels, state_size), std),
    }


# --------------------------------------------------------------------------- ES2D

@dataclass(frozen=True)
class ScanLayout:
    """Skip-sampled partition of an ``H x W`` grid into four stride-2 sub-grids.

    ``indices[o]`` lists the row-major flat positions of sub-grid ``o`` in the
    order they are scanned.
    """

    height: int
    width: int
    directions: tuple[str, ...]
    indices: tuple[np.ndarray, ...]

    @classmethod
    def build(cls, height: int, width: int, directions: Sequence[str] = DIRECTIONS,
              allow_odd: bool = False) -> "ScanLayout":
        if not allow_odd and (height % 2 or width % 2):
            raise ValueError(f"skip-sampled scan needs even extents, got {height}x{width}")
        if len(directions) != 4 or any(d not in DIRECTIONS for d in directions):
            raise ValueError(f"need four directions from {DIRECTIONS}, got {directions}")
        grid = np.arange(height * width).reshape(height, width)
        idx = []
        for (r0, c0), direction in zip(OFFSETS, directions):
            sub = grid[r0::2, c0::2]
            seq = sub.T.ravel() if direction.startswith("col") else sub.ravel()
            idx.append(seq[::-1].copy() if direction.endswith("_rev") else seq)
        return cls(height, width, tuple(directions), tuple(idx))

    @property
    def permutation(self) -> np.ndarray:
        return np.concatenate(self.indices)

    @property
    def inverse(self) -> np.ndarray:
        return np.argsort(self.permutation)

    @property
    def uniform(self) -> bool:
        return len({len(i) for i in self.indices}) == 1


def es2d_partition(feature, layout: ScanLayout) -> list[Tensor]:
    """Gather the four sub-grid token sequences ``[L_o, C]`` of an ``[H, W, C]`` map."""
    feature = as_tensor(feature)
    H, W, C = feature.shape
    if (H, W) != (layout.height, layout.width):
        raise ValueError(f"layout is for {layout.height}x{layout.width}, feature is {H}x{W}")
    flat = nx.reshape(feature, (H * W, C))
    return [nx.take(flat, idx, axis=0) for idx in layout.indices]


def es2d_scatter(sequences: Sequence[Tensor], layout: ScanLayout) -> Tensor:
    """Inverse of :func:`es2d_partition`."""
    flat = nx.concat(list(sequences), axis=0)
    flat = nx.take(flat, layout.inverse, axis=0)
    return nx.reshape(flat, (layout.height, layout.width, flat.shape[-1]))


def es2d_scan(feature, p: Mapping[str, Tensor], layout: ScanLayout | None = None) -> Tensor:
    """Partition, run a shared selective scan over each sub-sequence, scatter back."""
    feature = as_tensor(feature)
    H, W, C = feature.shape
    if layout is None:
        layout = ScanLayout.build(H, W, allow_odd=True)
    if layout.uniform:
        flat = nx.reshape(feature, (H * W, C))
        seqs = nx.reshape(nx.take(flat, layout.permutation, axis=0), (4, H * W // 4, C))
        y = selective_scan(seqs, p)
        y = nx.take(nx.reshape(y, (H * W, C)), layout.inverse, axis=0)
        return nx.reshape(y, (H, W, C))
    outs = [selective_scan(s, p) if s.shape[0] else s for s in es2d_partition(feature, layout)]
    return es2d_scatter(outs, layout)
