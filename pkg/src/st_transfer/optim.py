from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .exceptions import UsageError


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = 5.0
    inverse_sqrt_warmup: int | None = None  # None: constant learning rate


class Adam:
    """Adam with bias correction. ``step`` returns new arrays and never mutates its inputs."""

    def __init__(self, config: AdamConfig = AdamConfig()):
        self.config = config
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def learning_rate(self) -> float:
        c = self.config
        if not c.inverse_sqrt_warmup:
            return c.lr
        w = c.inverse_sqrt_warmup
        return c.lr * min(self.t / w, np.sqrt(w / self.t))

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        missing = set(params) - set(grads)
        if missing:
            raise UsageError(f"missing gradients for {sorted(missing)[:3]}")
        c = self.config
        grads = clip_by_global_norm(grads, c.clip_norm) if c.clip_norm else grads
        self.t += 1
        lr = self.learning_rate()
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        out = {}
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m = c.beta1 * m + (1.0 - c.beta1) * g
            v = c.beta2 * self.v[name] + (1.0 - c.beta2) * g * g
            self.m[name], self.v[name] = m, v
            upd = lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)
            out[name] = (p - upd).astype(p.dtype, copy=False)
        return out


def clip_by_global_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> Mapping[str, np.ndarray]:
    total = float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads.values())))
    if not np.isfinite(total) or total <= max_norm:
        return grads
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}


def optimizer_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
                   optimizer: Adam) -> dict[str, np.ndarray]:
    return optimizer.step(params, grads)
