from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..numcore import Tensor


@dataclass
class Adam:
    """Adam with step decay: lr = base_lr * decay ** (step // decay_every)."""

    base_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay: float = 0.5
    decay_every: int = 20000
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def lr_at(self, step: int) -> float:
        return self.base_lr * self.decay ** (step // self.decay_every)

    @property
    def lr(self) -> float:
        return self.lr_at(self.step)

    def update(self, params: dict[str, Tensor]) -> None:
        """Apply one update from each tensor's ``.grad`` (missing grad = zero)."""
        lr = self.lr
        t = self.step + 1
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)
        self.step += 1
