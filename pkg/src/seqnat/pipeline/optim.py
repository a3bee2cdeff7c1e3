from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..model import BLOCKS, ModelParams


def warmup_inverse_sqrt(step: int, total_steps: int, peak_lr: float, warmup_frac: float = 0.05) -> float:
    """Linear warmup over ``warmup_frac`` of the stage, then ``1/sqrt(step)`` decay."""
    warm = max(1, int(round(warmup_frac * total_steps)))
    step = max(step, 1)
    return peak_lr * min(step / warm, math.sqrt(warm / step))


@dataclass
class Adam:
    lr: float
    total_steps: int
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: ModelParams, grads: ModelParams) -> float:
        self.step_count += 1
        lr = warmup_inverse_sqrt(self.step_count, self.total_steps, self.lr)
        c1 = 1.0 - self.beta1**self.step_count
        c2 = 1.0 - self.beta2**self.step_count
        for name in BLOCKS:
            g = getattr(grads, name)
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            getattr(params, name)[...] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        params.generation += 1
        return lr
