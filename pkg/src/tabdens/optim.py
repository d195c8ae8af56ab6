"""AdamW with decoupled weight decay and a cosine warm-restart schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError


@dataclass
class CosineRestarts:
    """Cosine annealing that restarts from the top every ``cycle`` epochs."""

    lr_max: float = 1e-3
    lr_min: float = 1e-10
    cycle: int = 1024

    def __post_init__(self):
        if self.cycle < 1:
            raise ConfigError("cosine cycle must be at least 1 epoch")
        if self.lr_min > self.lr_max:
            raise ConfigError("lr_min exceeds lr_max")

    def lr_at(self, epoch: int) -> float:
        phase = (epoch % self.cycle) / self.cycle
        return float(self.lr_min + (self.lr_max - self.lr_min) * 0.5 * (1.0 + np.cos(np.pi * phase)))


@dataclass
class AdamW:
    """Decoupled-weight-decay Adam over a fixed list of parameter tensors.

    Decay multiplies the parameter by ``1 - lr * weight_decay`` before the
    moment update is applied, so it never enters the moment estimates.
    """

    params: list[Tensor]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    _m: list[np.ndarray] = field(default_factory=list, repr=False)
    _v: list[np.ndarray] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self._m = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]
        self._v = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        if lr is None:
            lr = self.lr
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64, copy=False)
            if self.weight_decay:
                p.data *= np.asarray(1.0 - lr * self.weight_decay, dtype=p.dtype)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= update.astype(p.dtype, copy=False)


def adamw_step(optimizer: AdamW, lr: float) -> None:
    """One update at an explicit learning rate, then clear gradients."""
    optimizer.step(lr=lr)
    optimizer.zero_grad()
