"""Adaptive moment optimizer with decoupled weight decay and polynomial decay."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


@dataclass
class OptimizerSettings:
    lr: float = 1e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    power: float = 0.9
    batch_size: int = 4
    steps: int = 2000

    def __post_init__(self):
        if self.lr <= 0 or self.steps < 1 or self.batch_size < 1:
            raise ValueError("optimizer settings out of range")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")


def polynomial_lr(lr0: float, step: int, total_steps: int, power: float) -> float:
    """lr(t) = lr0 * (1 - t / T)^power, evaluated at the start of step t."""
    frac = min(max(step / total_steps, 0.0), 1.0)
    return lr0 * (1.0 - frac) ** power


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], settings: OptimizerSettings):
        self.params = params
        self.settings = settings
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, lr: float | None = None) -> None:
        s = self.settings
        if lr is None:
            lr = polynomial_lr(s.lr, self.step_count, s.steps, s.power)
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - s.beta1**t
        bc2 = 1.0 - s.beta2**t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= s.beta1
            m += (1.0 - s.beta1) * g
            v *= s.beta2
            v += (1.0 - s.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + s.eps)
            p.data = p.data - lr * update - lr * s.weight_decay * p.data

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Moment buffers keyed for checkpoint embedding."""
        out = {}
        for name in self.params:
            out[f"optim/m/{name}"] = self.m[name]
            out[f"optim/v/{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for name in self.params:
            self.m[name] = arrays[f"optim/m/{name}"].astype(np.float64).copy()
            self.v[name] = arrays[f"optim/v/{name}"].astype(np.float64).copy()
        self.step_count = step_count
