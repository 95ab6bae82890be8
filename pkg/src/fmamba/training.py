"""Single-pair toy training: Adam on the weighted fusion objective."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .autodiff import AdamState, adam_step, value_and_grad
from .losses import DEFAULT_WEIGHTS, LossWeights, total_loss
from .network import ModelConfig, ModelState, forward_fuse, model_init
from .tape import NonFiniteError

LEARNING_RATE = 2e-4


class DivergenceError(RuntimeError):
    def __init__(self, step: int, reason: str):
        super().__init__(f"training diverged at step {step}: {reason}")
        self.step = step


@dataclass
class TrainResult:
    state: ModelState
    trace: list[dict[str, float]] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [t["total"] for t in self.trace]


def train_toy(pairs, steps: int, config: Optional[ModelConfig] = None,
              weights: LossWeights = DEFAULT_WEIGHTS, lr: float = LEARNING_RATE,
              state: Optional[ModelState] = None,
              log: Optional[Callable[[int, dict], None]] = None) -> TrainResult:
    """Run ``steps`` Adam updates cycling through ``pairs`` one pair per step.

    ``trace[k]`` holds the loss breakdown evaluated *before* update ``k + 1``,
    so ``trace[0]`` is the step-1 loss.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    pairs = [(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)) for a, b in pairs]
    if not pairs:
        raise ValueError("need at least one training pair")
    if state is None:
        state = model_init(config or ModelConfig.toy())
    cfg = state.config
    params = dict(state.params)
    opt = AdamState(lr=lr)
    result = TrainResult(state)
    for step in range(1, steps + 1):
        I1, I2 = pairs[(step - 1) % len(pairs)]

        def objective(p):
            return total_loss(I1, I2, forward_fuse(p, I1, I2, config=cfg), weights)

        try:
            _, breakdown, grads = value_and_grad(objective, params, aux=True)
        except NonFiniteError as exc:
            raise DivergenceError(step, str(exc)) from exc
        if not all(np.isfinite(g).all() for g in grads.values()):
            raise DivergenceError(step, "non-finite gradient")
        params, opt = adam_step(opt, params, grads)
        result.trace.append(breakdown)
        if log is not None:
            log(step, breakdown)
    result.state = ModelState(cfg, params)
    return result
