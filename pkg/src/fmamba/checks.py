"""Self-check suites behind ``fmamba check``.

Each suite returns a :class:`SuiteResult`. Passing ``fault=True`` corrupts one
intermediate value so the suite must fail; this is the negative control used
by the CLI's hidden ``--inject-fault`` hook.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses
from . import numerics as nx
from .autodiff import GradCheckReport, grad_check
from .blocks import (LdcKernel, dvss_forward, eca_forward, eca_kernel_size, essm_forward, init_dvss,
                     init_essm, ldc_forward)
from .fusion import ModalPair, cmfm_gate_fuse, cmfm_mix, dfem_forward, init_cmfm
from .init import as_params
from .metrics import fmi, fusion_ms_ssim, scd, vif
from .network import ModelConfig, forward_fuse, model_init
from .ssm import ssm_apply_conv_form, ssm_kernel, ssm_scan_recurrent, zoh_discretize

GRAD_TOL = 1e-5
E2E_TOL = 1e-4
FD_STEP = 1e-6
KINK_MARGIN = 1e-4


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


# --------------------------------------------------------------------------- ssm

def random_lti(rng: np.random.Generator, L: int, C: int, N: int):
    """A stable diagonal LTI system with a constant step size, repeated over ``L`` tokens."""
    A = -rng.uniform(0.1, 2.0, (C, N))
    delta = np.broadcast_to(rng.uniform(0.01, 0.5, C), (L, C)).copy()
    B = np.broadcast_to(rng.normal(size=N), (L, N)).copy()
    C_row = rng.normal(size=N)
    D = rng.normal(size=C)
    x = rng.normal(size=(L, C))
    return A, delta, B, C_row, D, x


def scan_equivalence_gap(rng: np.random.Generator, L: int, C: int, N: int) -> float:
    """max |recurrent - convolutional| output for one random LTI instance."""
    A, delta, B, C_row, D, x = random_lti(rng, L, C, N)
    disc = zoh_discretize(A, delta, B)
    y_rnn = ssm_scan_recurrent(disc.A_bar, disc.B_bar, np.broadcast_to(C_row, (L, N)), D, x).data
    y_conv = ssm_apply_conv_form(x, ssm_kernel(disc, C_row, L), D)
    return float(np.max(np.abs(y_rnn - y_conv)))


def suite_ssm(fault: bool = False, instances: int = 100) -> SuiteResult:
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(instances):
        L, C, N = int(rng.integers(1, 33)), int(rng.integers(1, 5)), int(rng.integers(1, 9))
        worst = max(worst, scan_equivalence_gap(rng, L, C, N))
    if fault:
        worst += 1e-6
    return SuiteResult("ssm", worst < 1e-10, f"{instances} LTI instances, max gap {worst:.2e}")


# --------------------------------------------------------------------------- zoh

ZOH_FIXTURE = (0.1, -1.0, 2.0)
ZOH_EXPECTED = (0.9048374180359595, 0.1903251639280809)


def zoh_scalar(delta: float, a: float, b: float) -> tuple[float, float]:
    disc = zoh_discretize(np.array([[a]]), np.array([[delta]]), np.array([[b]]))
    return float(disc.A_bar.data.ravel()[0]), float(disc.B_bar.data.ravel()[0])


def zoh_continuity_gap(delta: float = 0.1, b: float = 2.0, threshold: float = 1e-8) -> float:
    """Jump of B_bar across the series switch at ``|delta * a| = threshold``."""
    a = threshold / delta
    below = zoh_scalar(delta, -np.nextafter(a, 0.0), b)[1]
    above = zoh_scalar(delta, -np.nextafter(a, np.inf), b)[1]
    return abs(above - below)


def suite_zoh(fault: bool = False) -> SuiteResult:
    A_bar, B_bar = zoh_scalar(*ZOH_FIXTURE)
    if fault:
        B_bar += 1e-6
    err = max(abs(A_bar - ZOH_EXPECTED[0]), abs(B_bar - ZOH_EXPECTED[1]))
    gap = zoh_continuity_gap()
    ok = err < 1e-9 and gap < 1e-12
    return SuiteResult("zoh", ok, f"fixture error {err:.1e}, series-switch jump {gap:.1e}")


# --------------------------------------------------------------------------- ldc

def suite_ldc(fault: bool = False) -> SuiteResult:
    rng = np.random.default_rng(1)
    f = rng.normal(size=(9, 7, 5))
    w = rng.normal(size=(3, 3, 5))
    m = rng.normal(size=(3, 3, 5))
    vanilla = nx.depthwise_conv2d(f, w).data
    ok = np.array_equal(ldc_forward(f, LdcKernel(w, m, np.array(0.0))).data, vanilla)
    for eps in (0.25, 0.5, 1.0):
        out = ldc_forward(f, LdcKernel(w, np.ones_like(m), np.array(eps))).data
        if fault:
            out = out + 1e-12
        ok = ok and np.array_equal(out, vanilla)
    return SuiteResult("ldc", bool(ok), "eps=0 and m=1 (eps 0.25/0.5/1) match vanilla bit for bit"
                       if ok else "LDC degeneration differs from vanilla conv")


# --------------------------------------------------------------------------- gradients

GradCase = tuple[Callable, dict]


def _jitter(rng, params: dict, scale: float) -> dict:
    return {k: np.asarray(v, dtype=np.float64) + scale * rng.normal(size=np.shape(v)) for k, v in params.items()}


def _probe(rng, shape) -> np.ndarray:
    return rng.normal(size=shape)


def _readout(out, R):
    return nx.sum_(nx.mul(out, R))


def grad_cases() -> dict[str, GradCase]:
    """Small fixtures for every block and loss: name -> (loss_fn, params)."""
    rng = np.random.default_rng(7)
    cases: dict[str, GradCase] = {}

    C = 3
    R = _probe(rng, (6, 5, C))
    cases["ldc"] = (lambda p, R=R: _readout(from_ldc(p), R),
                    {"f": rng.normal(size=(6, 5, C)), "w": rng.normal(size=(3, 3, C)),
                     "m": rng.normal(size=(3, 3, C)), "epsilon": np.array(0.4)})

    C = 16
    R = _probe(rng, (4, 3, C))
    cases["eca"] = (lambda p, R=R: _readout(eca_forward(p["x"], p["weight"]), R),
                    {"x": rng.normal(size=(4, 3, C)), "weight": rng.normal(size=eca_kernel_size(C))})

    C, N = 4, 3
    R = _probe(rng, (4, 4, C))
    p = _jitter(rng, init_essm(rng, C, N), 0.3)
    p["x"] = rng.normal(size=(4, 4, C))
    cases["essm"] = (lambda p, R=R: _readout(essm_forward(p["x"], _drop(p, "x")), R), p)

    p = _jitter(rng, init_dvss(rng, C, N), 0.3)
    p["x"] = rng.normal(size=(4, 4, C))
    cases["dvss"] = (lambda p, R=R: _readout(dvss_forward(p["x"], _drop(p, "x")), R), p)

    R1, R2 = _probe(rng, (4, 4, C)), _probe(rng, (4, 4, C))
    p = {"F1": rng.normal(size=(4, 4, C)), "F2": rng.normal(size=(4, 4, C))}
    for i in (1, 2):
        p.update({f"ldc{i}.{k}": v + 0.3 * rng.normal(size=np.shape(v))
                  for k, v in LdcKernel.init(rng, C).items()})

    def dfem_loss(p, R1=R1, R2=R2):
        q = as_params(p)
        D1, D2 = dfem_forward(ModalPair(p["F1"], p["F2"]), LdcKernel.from_params(q.sub("ldc1")),
                              LdcKernel.from_params(q.sub("ldc2")))
        return nx.add(_readout(D1, R1), _readout(D2, R2))

    cases["dfem"] = (dfem_loss, p)

    R = _probe(rng, (4, 4, C))
    p = _jitter(rng, init_cmfm(rng, C, N), 0.3)
    p["D1"], p["D2"] = rng.normal(size=(4, 4, C)), rng.normal(size=(4, 4, C))

    def cmfm_loss(p, R=R):
        q = _drop(p, "D1", "D2")
        H = cmfm_mix(p["D1"], p["D2"], q)
        return _readout(cmfm_gate_fuse(H, p["D1"], p["D2"], q), R)

    cases["cmfm"] = (cmfm_loss, p)

    S = 16
    I1, I2 = rng.uniform(size=(S, S)), rng.uniform(size=(S, S))
    If = rng.uniform(0.1, 0.9, size=(S, S))
    cases["loss_text"] = (lambda p: losses.texture_loss(I1, I2, p["If"]), {"If": If})
    cases["loss_int"] = (lambda p: losses.intensity_loss(I1, I2, p["If"]), {"If": If})
    cases["loss_ssim"] = (lambda p: losses.ssim_loss(p["I1"], I2, p["If"]), {"I1": I1, "If": If})
    return cases


def from_ldc(p):
    return ldc_forward(p["f"], LdcKernel(p["w"], p["m"], p["epsilon"]))


def _drop(p, *names):
    return {k: v for k, v in p.items() if k not in names}


def e2e_case(size: int = 32) -> GradCase:
    """Micro model with a smooth objective (no abs/max on tracked values)."""
    cfg = ModelConfig.micro()
    rng = np.random.default_rng(11)
    params = _jitter(rng, model_init(cfg).params, 0.05)
    yy, xx = np.mgrid[0:size, 0:size] / size
    I1 = 0.5 + 0.4 * np.sin(2 * np.pi * 2 * xx) * np.cos(2 * np.pi * yy)
    I2 = 0.2 + 0.6 * yy
    R = _probe(rng, (size, size)) / size

    def loss(p):
        If = forward_fuse(p, I1, I2, config=cfg)
        return nx.add(nx.add(nx.mul(losses.intensity_loss(I1, I2, If), 100.0),
                             losses.ssim_loss(I1, I2, If)), _readout(If, R))

    return loss, params


def run_gradchecks(include_e2e: bool = True, e2e_coords: int = 2) -> dict[str, GradCheckReport]:
    reports = {name: grad_check(fn, p, h=FD_STEP, tol=GRAD_TOL, kink_margin=KINK_MARGIN)
               for name, (fn, p) in grad_cases().items()}
    if include_e2e:
        fn, p = e2e_case()
        reports["e2e_micro"] = grad_check(fn, p, h=FD_STEP, tol=E2E_TOL, max_coords=e2e_coords,
                                          kink_margin=KINK_MARGIN)
    return reports


def suite_grad(fault: bool = False) -> SuiteResult:
    reports = run_gradchecks()
    if fault:
        reports["ldc"].errors["w"] = 1.0
    bad = [k for k, r in reports.items() if not r.passed]
    worst = max(r.max_error for r in reports.values())
    detail = f"{len(reports)} gradchecks, worst rel err {worst:.1e}"
    if bad:
        detail += "; failing: " + ", ".join(f"{k} ({reports[k]})" for k in bad)
    return SuiteResult("grad", not bad, detail)


# --------------------------------------------------------------------------- losses

def loss_zeros() -> dict[str, float]:
    """Each loss term evaluated on one of its minimisers."""
    rng = np.random.default_rng(3)
    I1, I2 = rng.uniform(size=(24, 24)), rng.uniform(size=(24, 24))
    mx = np.maximum(I1, I2)
    flat = np.full((24, 24), 0.3)
    return {
        "int": losses.intensity_loss(I1, I2, mx).item(),
        # identical sources: the fused image equal to them carries exactly the maximal gradient
        "text": losses.texture_loss(I1, I1, I1).item(),
        "ssim": losses.ssim_loss(I1, I1, I1).item(),
        "text_flat": losses.texture_loss(flat, flat, flat).item(),
    }


def suite_losses(fault: bool = False) -> SuiteResult:
    zeros = loss_zeros()
    total = losses.combine((0.01, 0.02, 0.03), losses.DEFAULT_WEIGHTS)
    if fault:
        total += 1e-9
    ok = all(abs(v) <= 1e-12 for v in zeros.values()) and total == 1.23
    return SuiteResult("losses", ok, f"minimiser values {max(abs(v) for v in zeros.values()):.1e}, "
                                     f"weighted (0.01,0.02,0.03) = {total!r}")


# --------------------------------------------------------------------------- metrics

def orthogonal_scd_fixture(n: int = 32) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Zero-mean checkerboard and stripe patterns with ``If = I1 + I2``."""
    yy, xx = np.mgrid[0:n, 0:n]
    I1 = np.where((xx + yy) % 2 == 0, 1.0, -1.0)
    I2 = np.where((xx // 2) % 2 == 0, 1.0, -1.0)
    return I1, I2, I1 + I2


def suite_metrics(fault: bool = False) -> SuiteResult:
    yy, xx = np.mgrid[0:48, 0:48] / 48
    x = 0.5 + 0.3 * np.sin(2 * np.pi * 3 * xx) * np.cos(2 * np.pi * 2 * yy) + 0.1 * xx
    vals = {"msssim": fusion_ms_ssim(x, x, x), "fmi": fmi(x, x, x), "vif": vif(x, x, x)}
    vals["scd"] = scd(*orthogonal_scd_fixture())
    if fault:
        vals["fmi"] -= 1e-3
    ok = (abs(vals["msssim"] - 1) <= 1e-12 and abs(vals["fmi"] - 1) <= 1e-12
          and abs(vals["vif"] - 1) <= 1e-6 and abs(vals["scd"] - 2) <= 1e-9)
    return SuiteResult("metrics", ok, ", ".join(f"{k}={v:.10g}" for k, v in vals.items()))


# --------------------------------------------------------------------------- flops & audit

def linear_flops_fixture() -> tuple[int, int]:
    """(counted, hand-counted) flops for one 4x4x3 -> 5 linear layer."""
    counter = nx.FlopCounter()
    with nx.count_flops_into(counter):
        nx.linear(np.ones((4, 4, 3)), np.ones((3, 5)))
    return counter.total, 2 * 16 * 3 * 5


def suite_flops(fault: bool = False) -> SuiteResult:
    counted, expected = linear_flops_fixture()
    if fault:
        counted += 1
    return SuiteResult("flops", counted == expected, f"linear fixture {counted} vs hand count {expected}")


SUITES: dict[str, Callable[..., SuiteResult]] = {
    "ssm": suite_ssm,
    "zoh": suite_zoh,
    "ldc": suite_ldc,
    "losses": suite_losses,
    "metrics": suite_metrics,
    "flops": suite_flops,
    "grad": suite_grad,
}


def run_suites(names=None, inject_fault: str | None = None) -> list[SuiteResult]:
    names = list(SUITES) if names is None else list(names)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise KeyError(f"unknown suite(s): {', '.join(unknown)}; choose from {', '.join(SUITES)}")
    results = []
    for name in names:
        t0 = time.perf_counter()
        try:
            res = SUITES[name](fault=(name == inject_fault))
        except Exception as exc:  # a crashing suite is a failing suite
            res = SuiteResult(name, False, f"{type(exc).__name__}: {exc}")
        res.seconds = time.perf_counter() - t0
        results.append(res)
    return results
