"""Cross-modal fusion stage: difference-aware enhancement, Mamba-style mixing
and the per-level fused output."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .blocks import (LdcKernel, _sub, dense, eca_forward, eca_kernel_size, init_linear, init_ln,
                     layer_norm, ldc_forward)
from .init import as_params, trunc_normal
from .ssm import ScanLayout, es2d_scan, init_ssm_params
from .tape import Tensor, as_tensor


@dataclass
class ModalPair:
    F1: Tensor
    F2: Tensor

    def __post_init__(self):
        self.F1, self.F2 = as_tensor(self.F1), as_tensor(self.F2)
        if self.F1.shape != self.F2.shape:
            raise ValueError(f"modal feature shapes differ: {self.F1.shape} vs {self.F2.shape}")

    @property
    def Ff(self) -> Tensor:
        """Coarse fusion: elementwise sum of the two modalities."""
        return nx.add(self.F1, self.F2)


def dfem_forward(pair: ModalPair, ldc1: LdcKernel, ldc2: LdcKernel) -> tuple[Tensor, Tensor]:
    """Texture enhancement plus a per-channel difference gate on the coarse fusion."""
    T1 = ldc_forward(pair.F1, ldc1)
    T2 = ldc_forward(pair.F2, ldc2)
    Ff = pair.Ff
    w1 = nx.sigmoid(nx.global_avg_pool(nx.sub(T2, T1)))
    w2 = nx.sigmoid(nx.global_avg_pool(nx.sub(T1, T2)))
    D1 = nx.add(nx.add(pair.F1, T1), nx.mul(w1, Ff))
    D2 = nx.add(nx.add(pair.F2, T2), nx.mul(w2, Ff))
    return D1, D2


def _check_same(*ts) -> None:
    shapes = {as_tensor(t).shape for t in ts}
    if len(shapes) != 1:
        raise ValueError(f"shape mismatch: {sorted(shapes)}")


def cmfm_mix(D1, D2, p) -> Tensor:
    """``C_i = DwConv(Linear(LN(D_i)))``; returns ``C1*C2 + C1 + C2``."""
    _check_same(D1, D2)
    p = as_params(p)
    C1 = nx.depthwise_conv2d(dense(layer_norm(D1, p.sub("ln1")), p.sub("lin1")), p["dw1.weight"])
    C2 = nx.depthwise_conv2d(dense(layer_norm(D2, p.sub("ln2")), p.sub("lin2")), p["dw2.weight"])
    return nx.add(nx.add(nx.mul(C1, C2), C1), C2)


def cmfm_gate_fuse(H_mix, D1, D2, p, layout: ScanLayout | None = None) -> Tensor:
    """``S = LN(ES2D(H_mix))``; ``H_i = S * Linear(D_i)``; ``ECA(Linear(H1+H2)) + (H1+H2)``."""
    _check_same(H_mix, D1, D2)
    p = as_params(p)
    S = layer_norm(es2d_scan(H_mix, p.sub("scan"), layout), p.sub("ln_s"))
    H1 = nx.mul(S, dense(D1, p.sub("proj1")))
    H2 = nx.mul(S, dense(D2, p.sub("proj2")))
    Hs = nx.add(H1, H2)
    return nx.add(eca_forward(dense(Hs, p.sub("proj_out")), p["eca.weight"]), Hs)


def layer_fuse(H_f, F1, F2) -> Tensor:
    _check_same(H_f, F1, F2)
    return nx.add(nx.add(H_f, F1), F2)


def init_cmfm(rng, channels: int, state_size: int) -> dict:
    params = {}
    for i in (1, 2):
        params.update(_sub(f"ln{i}", init_ln(channels)))
        params.update(_sub(f"lin{i}", init_linear(rng, channels, channels)))
        params[f"dw{i}.weight"] = trunc_normal(rng, (3, 3, channels))
    params.update(_sub("scan", init_ssm_params(rng, channels, state_size)))
    params.update(_sub("ln_s", init_ln(channels)))
    params.update(_sub("proj1", init_linear(rng, channels, channels)))
    params.update(_sub("proj2", init_linear(rng, channels, channels)))
    params.update(_sub("proj_out", init_linear(rng, channels, channels)))
    params["eca.weight"] = trunc_normal(rng, (eca_kernel_size(channels),))
    return params


def init_dffm(rng, channels: int, state_size: int) -> dict:
    params = {}
    params.update(_sub("dfem1", LdcKernel.init(rng, channels)))
    params.update(_sub("dfem2", LdcKernel.init(rng, channels)))
    params.update(_sub("cmfm", init_cmfm(rng, channels, state_size)))
    return params


def dffm_forward(pair: ModalPair, p, layout: ScanLayout | None = None) -> Tensor:
    """Two enhancement branches, one cross-modal mixer, then the level output ``H_f + F1 + F2``."""
    p = as_params(p)
    D1, D2 = dfem_forward(pair, LdcKernel.from_params(p.sub("dfem1")),
                          LdcKernel.from_params(p.sub("dfem2")))
    cm = p.sub("cmfm")
    H_mix = cmfm_mix(D1, D2, cm)
    H_f = cmfm_gate_fuse(H_mix, D1, D2, cm, layout)
    return layer_fuse(H_f, pair.F1, pair.F2)


def tie_branches(params: dict, prefix: str = "") -> dict:
    """Copy every branch-2 parameter of a fusion block onto its branch-1 twin.

    Used to build modality-symmetric fixtures.
    """
    out = dict(params)
    pairs = [("dfem2.", "dfem1."), ("cmfm.ln2.", "cmfm.ln1."), ("cmfm.lin2.", "cmfm.lin1."),
             ("cmfm.dw2.", "cmfm.dw1."), ("cmfm.proj2.", "cmfm.proj1.")]
    for name in params:
        local = name[len(prefix):]
        for dst, src in pairs:
            if local.startswith(dst):
                out[name] = np.array(params[prefix + src + local[len(dst):]], copy=True)
    return out
