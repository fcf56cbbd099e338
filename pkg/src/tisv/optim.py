"""SGD with heavy-ball momentum and coupled L2 weight decay."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor
from .errors import ConfigurationError, TrainingDivergedError


@dataclass
class SgdConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigurationError(f"weight_decay must be non-negative, got {self.weight_decay}")


class Sgd:
    """Update rule, per parameter::

        v <- momentum * v + grad + weight_decay * theta
        theta <- theta - lr * v

    Gradients are cleared after every step.  Parameters without a gradient
    still decay.
    """

    def __init__(self, params, cfg: SgdConfig):
        self.params: dict[str, Tensor] = dict(params.items())
        self.cfg = cfg
        self.velocity = {k: np.zeros_like(t.data) for k, t in self.params.items()}
        self.steps = 0

    def step(self) -> None:
        cfg = self.cfg
        for name, t in self.params.items():
            if t.grad is not None and not np.all(np.isfinite(t.grad)):
                raise TrainingDivergedError(f"non-finite gradient in {name!r}", self.steps)
        for name, t in self.params.items():
            g = t.grad if t.grad is not None else 0.0
            v = self.velocity[name]
            v *= cfg.momentum
            v += g
            if cfg.weight_decay:
                v += cfg.weight_decay * t.data
            t.data -= cfg.learning_rate * v
            t.grad = None
        self.steps += 1


def sgd_step(params, cfg: SgdConfig, velocity: dict | None = None) -> dict:
    """Functional single step; returns the (updated) velocity dict to thread into the next call."""
    opt = Sgd(params, cfg)
    if velocity is not None:
        opt.velocity = velocity
    opt.step()
    return opt.velocity
