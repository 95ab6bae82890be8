import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from fmamba import FusionMamba
from fmamba.estimator import check_pairs
from fmamba.network import ModelConfig, fuse_images, model_init


def batch(n=2, size=32):
    yy, xx = np.mgrid[0:size, 0:size] / size
    out = []
    for k in range(n):
        out.append([0.5 + 0.4 * np.sin(2 * np.pi * (2 * xx + 0.1 * k)) * np.cos(2 * np.pi * yy), 0.2 + 0.6 * yy])
    return np.array(out)


def test_params_and_clone():
    est = FusionMamba(preset="micro", steps=3, seed=4)
    assert est.get_params()["steps"] == 3
    c = clone(est)
    assert c.get_params() == est.get_params() and c is not est


def test_unfitted():
    with pytest.raises(NotFittedError):
        FusionMamba().transform(batch())


def test_fit_without_steps_is_init():
    X = batch()
    est = FusionMamba(preset="micro", steps=0).fit(X)
    assert est.loss_trace_ == [] and est.n_params_ == model_init(ModelConfig.micro()).n_params
    out = est.transform(X)
    assert out.shape == (2, 32, 32)
    np.testing.assert_array_equal(out[0], fuse_images(model_init(ModelConfig.micro()), X[0, 0], X[0, 1]))
    np.testing.assert_array_equal(est.predict(X[0]), out[:1])


def test_fit_with_steps_records_trace():
    est = FusionMamba(preset="micro", steps=2).fit(batch(1))
    assert len(est.loss_trace_) == 2 and all(np.isfinite(est.loss_trace_))
    assert est.score(batch(1)) < 0


def test_overrides_and_from_state():
    est = FusionMamba(preset="micro", state_size=3, steps=0).fit(batch(1))
    assert est.state_.config.state_size == 3
    wrapped = FusionMamba.from_state(est.state_)
    np.testing.assert_array_equal(wrapped.transform(batch(1)), est.transform(batch(1)))
    assert wrapped.score(batch(1)) == est.score(batch(1))


def test_validation():
    with pytest.raises(ValueError, match="preset"):
        FusionMamba(preset="huge", steps=0).fit(batch())
    with pytest.raises(ValueError, match="steps"):
        FusionMamba(preset="micro", steps=-1).fit(batch())
    with pytest.raises(ValueError, match="divisible"):
        FusionMamba(preset="micro", steps=0).fit(batch(size=24))
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        check_pairs(batch() * 2)
    with pytest.raises(ValueError, match="shape"):
        check_pairs(np.zeros((2, 3, 32, 32)))
