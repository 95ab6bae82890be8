import numpy as np
import pytest

from fmamba import training
from fmamba.losses import total_loss
from fmamba.network import ModelConfig, forward_fuse, model_init
from fmamba.tape import NonFiniteError
from fmamba.training import DivergenceError, train_toy


def pair(n=32, phase=0.0):
    yy, xx = np.mgrid[0:n, 0:n] / n
    return 0.5 + 0.4 * np.sin(2 * np.pi * (2 * xx + phase)) * np.cos(2 * np.pi * yy), 0.2 + 0.6 * yy


def test_needs_a_step_and_a_pair():
    with pytest.raises(ValueError, match="steps"):
        train_toy([pair()], 0, ModelConfig.micro())
    with pytest.raises(ValueError, match="pair"):
        train_toy([], 1, ModelConfig.micro())


def test_first_trace_entry_is_initial_loss():
    I1, I2 = pair()
    cfg = ModelConfig.micro()
    res = train_toy([(I1, I2)], 2, cfg)
    init = model_init(cfg)
    _, want = total_loss(I1, I2, forward_fuse(init, I1, I2))
    assert res.trace[0]["total"] == pytest.approx(want["total"], rel=1e-12)
    assert len(res.losses) == 2
    assert any(not np.array_equal(res.state.params[k], init.params[k]) for k in init.params)


def test_runs_are_deterministic():
    a = train_toy([pair()], 3, ModelConfig.micro())
    b = train_toy([pair()], 3, ModelConfig.micro())
    assert a.losses == b.losses
    assert all(np.array_equal(a.state.params[k], b.state.params[k]) for k in a.state.params)


def test_pairs_are_cycled_in_order():
    seen = []
    pairs = [pair(phase=p) for p in (0.0, 0.25, 0.5)]
    train_toy(pairs, 5, ModelConfig.micro(), log=lambda step, br: seen.append((step, br["total"])))
    assert [s for s, _ in seen] == [1, 2, 3, 4, 5]
    assert len({round(v, 12) for _, v in seen[:3]}) == 3


def test_divergence_reports_step(monkeypatch):
    real = training.value_and_grad
    calls = {"n": 0}

    def flaky(*args, **kw):
        calls["n"] += 1
        if calls["n"] == 3:
            raise NonFiniteError("ssm.scan")
        return real(*args, **kw)

    monkeypatch.setattr(training, "value_and_grad", flaky)
    with pytest.raises(DivergenceError, match="step 3: non-finite value produced by ssm.scan") as info:
        train_toy([pair()], 5, ModelConfig.micro())
    assert info.value.step == 3


def test_nonfinite_gradient_is_divergence(monkeypatch):
    real = training.value_and_grad

    def poisoned(*args, **kw):
        v, br, g = real(*args, **kw)
        k = next(iter(g))
        g[k] = np.full_like(g[k], np.nan)
        return v, br, g

    monkeypatch.setattr(training, "value_and_grad", poisoned)
    with pytest.raises(DivergenceError, match="step 1: non-finite gradient"):
        train_toy([pair()], 2, ModelConfig.micro())
