from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Parameter


@dataclass
class AdamConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.98)
    eps: float = 1e-8
    warmup_steps: int = 100
    clip_norm: float = 0.0


class Adam:
    """Adam with linear warmup to a constant rate.

    Only parameters handed to the constructor are ever touched; anything left
    out stays bit-identical.
    """

    def __init__(self, params: list[Parameter], config: AdamConfig | None = None):
        self.params = list(params)
        self.config = config or AdamConfig()
        self.step_count = 0
        self.m = {id(p): np.zeros_like(p.data) for p in self.params}
        self.v = {id(p): np.zeros_like(p.data) for p in self.params}

    def current_lr(self) -> float:
        c = self.config
        if c.warmup_steps > 0 and self.step_count < c.warmup_steps:
            return c.lr * (self.step_count + 1) / c.warmup_steps
        return c.lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> float:
        """Apply one update; returns the pre-clipping gradient norm."""
        c = self.config
        grads = [p.grad for p in self.params]
        sq = sum(float((g * g).sum()) for g in grads if g is not None)
        norm = float(np.sqrt(sq))
        scale = 1.0
        if c.clip_norm > 0 and norm > c.clip_norm:
            scale = c.clip_norm / (norm + 1e-6)
        lr = self.current_lr()
        self.step_count += 1
        b1, b2 = c.betas
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for p, g in zip(self.params, grads):
            if g is None:
                continue
            g = g * scale
            m, v = self.m[id(p)], self.v[id(p)]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)
        return norm

    def state(self) -> dict:
        return {"step": self.step_count,
                "m": [self.m[id(p)].copy() for p in self.params],
                "v": [self.v[id(p)].copy() for p in self.params]}

    def load_state(self, state: dict) -> None:
        self.step_count = int(state["step"])
        for p, m, v in zip(self.params, state["m"], state["v"]):
            self.m[id(p)] = np.array(m, dtype=np.float64)
            self.v[id(p)] = np.array(v, dtype=np.float64)
