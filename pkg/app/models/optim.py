from typing import Dict, Iterable, Optional

import numpy as np

from app.models.tensor import Parameter


class SGD:
    """SGD with momentum and L2 weight decay, keyed by parameter name"""

    def __init__(
        self,
        params: Iterable[Parameter],
        lr: float,
        momentum: float = 0.9,
        weight_decay: float = 5e-4,
        clip_norm: float = 0.0,
    ):
        self.params: Dict[str, Parameter] = {p.name: p for p in params}
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.velocity: Dict[str, np.ndarray] = {}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def reset_state(self, prefix: Optional[str] = None):
        """Drop momentum buffers, optionally only for names under ``prefix``"""
        if prefix is None:
            self.velocity.clear()
            return
        for name in [n for n in self.velocity if n.startswith(prefix)]:
            del self.velocity[name]

    def grad_norm(self) -> float:
        total = 0.0
        for p in self.params.values():
            if p.grad is not None:
                total += float(np.sum(p.grad * p.grad))
        return float(np.sqrt(total))

    def step(self) -> float:
        """Apply one update; returns the pre-clip gradient norm"""
        norm = self.grad_norm()
        factor = 1.0
        if self.clip_norm > 0 and norm > self.clip_norm:
            factor = self.clip_norm / norm
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad * factor + self.weight_decay * p.data
            v = self.velocity.get(name)
            v = g if v is None else self.momentum * v + g
            self.velocity[name] = v
            p.data = p.data - self.lr * v
        return norm
