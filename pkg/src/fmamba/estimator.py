"""scikit-learn style wrapper around model initialisation, toy training and fusion."""
from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .losses import LossWeights, total_loss
from .network import ModelConfig, ModelState, forward_fuse, model_init
from .training import LEARNING_RATE, train_toy

_PRESETS = {"full": ModelConfig, "toy": ModelConfig.toy, "micro": ModelConfig.micro}


def check_image(x, name: str = "image") -> np.ndarray:
    """Validate one ``[H, W]`` image with finite values in [0, 1]."""
    a = check_array(x, dtype=np.float64, ensure_2d=True, input_name=name)
    if a.min() < 0.0 or a.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return a


def check_pairs(X, stride: Optional[int] = None) -> np.ndarray:
    """Validate source pairs as a ``[n, 2, H, W]`` float array in [0, 1].

    A single ``[2, H, W]`` pair is promoted to a batch of one.
    """
    a = check_array(X, dtype=np.float64, allow_nd=True, ensure_2d=False, input_name="X")
    if a.ndim == 3:
        a = a[None]
    if a.ndim != 4 or a.shape[1] != 2:
        raise ValueError(f"X must have shape [n, 2, H, W], got {a.shape}")
    if a.min() < 0.0 or a.max() > 1.0:
        raise ValueError("X values must lie in [0, 1]")
    if stride and (a.shape[2] % stride or a.shape[3] % stride):
        raise ValueError(f"image extents {a.shape[2]}x{a.shape[3]} must be divisible by {stride}")
    return a


class FusionMamba(TransformerMixin, BaseEstimator):
    """Fuse pairs of registered grayscale images.

    ``fit`` initialises the network from ``seed`` and, when ``steps > 0``,
    runs that many Adam steps over the given pairs. ``transform`` (alias
    ``predict``) maps ``[n, 2, H, W]`` source pairs to ``[n, H, W]`` fused images.
    """

    def __init__(self, preset: str = "toy", base_dim: Optional[int] = None, depths=None,
                 state_size: Optional[int] = None, seed: int = 0, steps: int = 200,
                 weights=(100.0, 10.0, 1.0), lr: float = LEARNING_RATE):
        self.preset = preset
        self.base_dim = base_dim
        self.depths = depths
        self.state_size = state_size
        self.seed = seed
        self.steps = steps
        self.weights = weights
        self.lr = lr

    def _config(self) -> ModelConfig:
        if self.preset not in _PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {sorted(_PRESETS)}")
        base = _PRESETS[self.preset](seed=self.seed)
        over = {k: v for k, v in (("base_dim", self.base_dim), ("depths", self.depths),
                                  ("state_size", self.state_size)) if v is not None}
        return ModelConfig(**{**base.__dict__, **over}) if over else base

    def fit(self, X, y=None):
        cfg = self._config()
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        pairs = check_pairs(X, cfg.stride)
        self.weights_ = LossWeights(*self.weights)
        if self.steps == 0:
            self.state_ = model_init(cfg)
            self.loss_trace_ = []
        else:
            result = train_toy([(p[0], p[1]) for p in pairs], self.steps, cfg, self.weights_, self.lr)
            self.state_ = result.state
            self.loss_trace_ = result.losses
        self.n_params_ = self.state_.n_params
        return self

    @classmethod
    def from_state(cls, state: ModelState) -> "FusionMamba":
        """Wrap an already trained or loaded model state."""
        c = state.config
        est = cls(preset="full", base_dim=c.base_dim, depths=c.depths, state_size=c.state_size,
                  seed=c.seed, steps=0)
        est.state_ = state
        est.weights_ = LossWeights(*est.weights)
        est.loss_trace_ = []
        est.n_params_ = state.n_params
        return est

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "state_")
        pairs = check_pairs(X, self.state_.config.stride)
        return np.stack([forward_fuse(self.state_, p[0], p[1]).data for p in pairs])

    def predict(self, X) -> np.ndarray:
        return self.transform(X)

    def score(self, X, y=None) -> float:
        """Negative mean training objective (higher is better)."""
        check_is_fitted(self, "state_")
        pairs = check_pairs(X, self.state_.config.stride)
        fused = self.transform(pairs)
        vals = [total_loss(p[0], p[1], f, self.weights_)[0].item() for p, f in zip(pairs, fused)]
        return -float(np.mean(vals))
