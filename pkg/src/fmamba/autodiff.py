"""Reverse-mode gradients, a central-difference oracle, gradient checking and Adam."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

from .tape import PRIMITIVES, Tape, Tensor

ParamDict = Mapping[str, np.ndarray]
LossFn = Callable[[Mapping[str, Tensor]], Tensor]


def _as_dict(params) -> tuple[dict[str, np.ndarray], bool]:
    if isinstance(params, Mapping):
        return {k: np.array(v, dtype=np.float64) for k, v in params.items()}, False
    return {"x": np.array(params, dtype=np.float64)}, True


def _scalar(out, where: str = "loss_fn") -> Tensor:
    if not isinstance(out, Tensor):
        raise TypeError(f"{where} must return a Tensor built from registered primitives "
                        f"({len(PRIMITIVES)} available), got {type(out).__name__}")
    if out.size != 1:
        raise ValueError(f"{where} must return a scalar, got shape {out.shape}")
    return out


def value_and_grad(loss_fn, params, *, aux: bool = False):
    """Evaluate ``loss_fn`` on a fresh tape and return ``(value, gradients)``.

    ``params`` is a name -> array mapping (or a single array, in which case the
    gradient is a single array too). With ``aux=True`` the function returns
    ``(loss, extra)`` and the result is ``(value, extra, gradients)``.
    """
    store, single = _as_dict(params)
    with Tape() as tape:
        watched = {k: tape.watch(v) for k, v in store.items()}
        result = loss_fn(watched["x"] if single else watched)
        out, extra = result if aux else (result, None)
        out = _scalar(out)
        grads = tape.gradient(out, list(watched.values()))
    gdict = dict(zip(watched, grads))
    g = gdict["x"] if single else gdict
    if aux:
        return out.item(), extra, g
    return out.item(), g


def grad(loss_fn, params):
    """Exact reverse-mode gradient of a scalar ``loss_fn`` with respect to ``params``."""
    return value_and_grad(loss_fn, params)[1]


def _evaluate(loss_fn, store: dict, single: bool) -> float:
    wrapped = {k: Tensor(v) for k, v in store.items()}
    return _scalar(loss_fn(wrapped["x"] if single else wrapped)).item()


def finite_diff_grad(loss_fn, params, h: float = 1e-6,
                     coords: Optional[Mapping[str, np.ndarray]] = None):
    """Central differences ``(f(x+h) - f(x-h)) / 2h`` per coordinate.

    ``coords`` optionally restricts each block to a subset of flat indices;
    skipped entries are NaN.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    store, single = _as_dict(params)
    out = {}
    for name, value in store.items():
        g = np.full(value.size, np.nan) if coords is not None else np.empty(value.size)
        idx = range(value.size) if coords is None else coords.get(name, ())
        flat = value.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = _evaluate(loss_fn, store, single)
            flat[i] = orig - h
            f_minus = _evaluate(loss_fn, store, single)
            flat[i] = orig
            g[i] = (f_plus - f_minus) / (2.0 * h)
        out[name] = g.reshape(value.shape)
    return out["x"] if single else out


@dataclass
class GradCheckReport:
    tol: float
    errors: dict[str, float] = field(default_factory=dict)
    kink_distance: float = np.inf
    kink_margin: float = 0.0

    @property
    def near_kink(self) -> bool:
        return self.kink_distance < self.kink_margin

    @property
    def failures(self) -> list[str]:
        return [k for k, e in self.errors.items() if not e <= self.tol]

    @property
    def passed(self) -> bool:
        return not self.failures and not self.near_kink

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def __str__(self) -> str:
        status = "PASS" if self.passed else ("NEAR-KINK" if self.near_kink else "FAIL")
        worst = max(self.errors, key=self.errors.get) if self.errors else "-"
        return f"{status} max_rel_err={self.max_error:.3e} (tol {self.tol:g}, worst {worst})"


def relative_error(g_ad: np.ndarray, g_fd: np.ndarray) -> np.ndarray:
    return np.abs(g_ad - g_fd) / np.maximum(1.0, np.maximum(np.abs(g_ad), np.abs(g_fd)))


def grad_check(loss_fn, params, h: float = 1e-6, tol: float = 1e-5, *,
               max_coords: Optional[int] = None, seed: int = 0,
               kink_margin: float = 1e-3) -> GradCheckReport:
    """Compare reverse-mode and central-difference gradients block by block.

    A block passes when ``max |g_ad - g_fd| / max(1, |g_ad|, |g_fd|) <= tol``.
    ``max_coords`` samples at most that many coordinates per block. When an
    abs/max argument at the evaluation point lies within ``kink_margin`` of its
    kink the report is flagged ``near_kink`` and does not pass.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    store, single = _as_dict(params)
    if single:
        fn = loss_fn
        loss_fn = lambda p: fn(p["x"])  # noqa: E731
    with Tape() as tape:
        watched = {k: tape.watch(v) for k, v in store.items()}
        out = _scalar(loss_fn(watched))
        g_ad = dict(zip(watched, tape.gradient(out, list(watched.values()))))
    coords = None
    if max_coords is not None:
        rng = np.random.default_rng(seed)
        coords = {k: (np.arange(v.size) if v.size <= max_coords
                      else np.sort(rng.choice(v.size, max_coords, replace=False)))
                  for k, v in store.items()}
    g_fd = finite_diff_grad(loss_fn, store, h, coords)
    report = GradCheckReport(tol=tol, kink_distance=tape.kink_distance, kink_margin=kink_margin)
    for name in store:
        a, f = g_ad[name].reshape(-1), g_fd[name].reshape(-1)
        sel = ~np.isnan(f)
        report.errors[name] = float(relative_error(a[sel], f[sel]).max()) if sel.any() else 0.0
    return report


# --------------------------------------------------------------------------- Adam

@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: ParamDict, grads: ParamDict) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update; inputs are left untouched."""
    if set(params) != set(grads):
        raise ValueError("parameter and gradient names differ")
    step = state.step + 1
    new_params, m_new, v_new = {}, {}, {}
    c1 = 1.0 - state.beta1 ** step
    c2 = 1.0 - state.beta2 ** step
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != np.shape(p):
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {np.shape(p)}")
        m = state.m.get(name, np.zeros_like(g))
        v = state.v.get(name, np.zeros_like(g))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_params[name] = p - update
        m_new[name], v_new[name] = m, v
    return new_params, AdamState(state.lr, state.beta1, state.beta2, state.eps, step, m_new, v_new)
