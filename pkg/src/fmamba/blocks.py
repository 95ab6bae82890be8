"""Per-layer blocks: learnable descriptive convolution, channel attention,
the gated state-space module and the dynamic visual state-space block."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .init import Params, as_params, trunc_normal
from .ssm import ScanLayout, es2d_scan, init_ssm_params
from .tape import Tensor, as_tensor

EXPAND = 2
LN_EPS = 1e-5


@dataclass
class LdcKernel:
    """Depthwise 3x3 weights ``w``, descriptive mask ``m`` (both ``[3, 3, C]``) and mix ``epsilon``."""

    w: Tensor
    m: Tensor
    epsilon: Tensor

    @classmethod
    def from_params(cls, p) -> "LdcKernel":
        p = as_params(p)
        return cls(p["w"], p["m"], p["epsilon"])

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int) -> dict:
        return {"w": trunc_normal(rng, (3, 3, channels)),
                "m": np.ones((3, 3, channels)),
                "epsilon": np.array(0.5)}


def ldc_forward(f, kernel: LdcKernel) -> Tensor:
    """Blend of vanilla and mask-modulated depthwise convolution.

    ``(1-eps) * conv(f, w) + eps * conv(f, w*m)`` is evaluated through the
    single effective kernel ``w + eps * w * (m - 1)``; with ``eps = 0`` or
    ``m = 1`` that kernel is ``w`` exactly, so the result equals the vanilla
    convolution bit for bit.
    """
    w_eff = nx.add(kernel.w, nx.mul(kernel.epsilon, nx.mul(kernel.w, nx.sub(kernel.m, 1.0))))
    return nx.depthwise_conv2d(f, w_eff)


@dataclass(frozen=True)
class EcaConfig:
    gamma: int = 2
    b: int = 1


def eca_kernel_size(channels: int, cfg: EcaConfig = EcaConfig()) -> int:
    if channels < 1:
        raise ValueError("channel count must be >= 1")
    t = int(abs(math.log2(channels) + cfg.b) // cfg.gamma)
    k = t if t % 2 else t + 1
    return max(k, 1)


def eca_forward(x, weight) -> Tensor:
    """Scale each channel by ``sigmoid(conv1d(GAP(x)))``."""
    x = as_tensor(x)
    pooled = nx.reshape(nx.global_avg_pool(x), (x.shape[-1],))
    s = nx.sigmoid(nx.channel_conv1d(pooled, weight))
    return nx.mul(x, s)


def init_linear(rng, cin: int, cout: int, bias: bool = True) -> dict:
    out = {"weight": trunc_normal(rng, (cin, cout))}
    if bias:
        out["bias"] = np.zeros(cout)
    return out


def init_ln(channels: int) -> dict:
    return {"gain": np.ones(channels), "shift": np.zeros(channels)}


def _sub(prefix: str, d: dict) -> dict:
    return {f"{prefix}.{k}": v for k, v in d.items()}


def layer_norm(x, p: Params) -> Tensor:
    return nx.layer_norm(x, p["gain"], p["shift"], LN_EPS)


def dense(x, p: Params) -> Tensor:
    return nx.linear(x, p["weight"], p["bias"] if "bias" in p else None)


def init_essm(rng, channels: int, state_size: int) -> dict:
    inner = EXPAND * channels
    params = {}
    params.update(_sub("in_x", init_linear(rng, channels, inner)))
    params.update(_sub("in_z", init_linear(rng, channels, inner)))
    params["dwconv.weight"] = trunc_normal(rng, (3, 3, inner))
    params.update(_sub("scan", init_ssm_params(rng, inner, state_size)))
    params.update(_sub("norm", init_ln(inner)))
    params.update(_sub("out", init_linear(rng, inner, channels)))
    return params


def essm_forward(x, p, layout: ScanLayout | None = None) -> Tensor:
    """Gated state-space module.

    Main branch: linear -> 3x3 depthwise conv -> SiLU -> skip-sampled scan -> LN.
    Gate: linear -> SiLU. Output: linear(main * gate).
    """
    p = as_params(p)
    main = dense(x, p.sub("in_x"))
    main = nx.depthwise_conv2d(main, p["dwconv.weight"])
    main = nx.silu(main)
    main = es2d_scan(main, p.sub("scan"), layout)
    main = layer_norm(main, p.sub("norm"))
    gate = nx.silu(dense(x, p.sub("in_z")))
    return dense(nx.mul(main, gate), p.sub("out"))


def init_dvss(rng, channels: int, state_size: int) -> dict:
    params = {}
    params.update(_sub("ln1", init_ln(channels)))
    params.update(_sub("essm", init_essm(rng, channels, state_size)))
    params.update(_sub("ln2", init_ln(channels)))
    params["eca.weight"] = trunc_normal(rng, (eca_kernel_size(channels),))
    params.update(_sub("ldc", LdcKernel.init(rng, channels)))
    return params


def dvss_forward(f, p, layout: ScanLayout | None = None) -> Tensor:
    """``Z = ESSM(LN(F)) + F``; output ``ECA(LN(Z)) + LDC(F) + Z``."""
    p = as_params(p)
    z = nx.add(essm_forward(layer_norm(f, p.sub("ln1")), p.sub("essm"), layout), f)
    attended = eca_forward(layer_norm(z, p.sub("ln2")), p["eca.weight"])
    local = ldc_forward(f, LdcKernel.from_params(p.sub("ldc")))
    return nx.add(nx.add(attended, local), z)
