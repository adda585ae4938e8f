from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .nn import Parameter


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


class Adam:
    """Bias-corrected Adam with decoupled weight decay."""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0, names: Sequence[str] | None = None):
        self.params = list(params)
        self.names = list(names) if names is not None else [f"param[{i}]" for i in range(len(self.params))]
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps, weight_decay=weight_decay)
        self.state.m = [np.zeros_like(p.data) for p in self.params]
        self.state.v = [np.zeros_like(p.data) for p in self.params]

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float):
        self.state.lr = value

    def step(self):
        s = self.state
        for name, p in zip(self.names, self.params):
            if p.grad is None:
                raise ValueError(f"parameter {name} has no gradient")
        s.step += 1
        bc1 = 1.0 - s.beta1**s.step
        bc2 = 1.0 - s.beta2**s.step
        for p, m, v in zip(self.params, s.m, s.v):
            g = p.grad
            m *= s.beta1
            m += (1.0 - s.beta1) * g
            v *= s.beta2
            v += (1.0 - s.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + s.eps)
            if s.weight_decay:
                p.data -= (s.lr * s.weight_decay) * p.data
            p.data -= (s.lr * update).astype(p.data.dtype)
            p.grad = None

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def step_lr(base_lr: float, epoch: int, drops: Sequence[int], factor: float = 0.1) -> float:
    """Learning rate for a 0-based ``epoch``: multiplied by ``factor`` at each drop epoch reached."""
    return base_lr * factor ** sum(1 for d in drops if epoch >= d)
