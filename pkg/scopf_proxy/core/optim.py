from dataclasses import dataclass, field

import numpy as np

from .gnn import ModelParams


@dataclass
class AdamW:
    """Adam with decoupled weight decay, updating ``ModelParams`` in place.

    Each step shrinks the weights by ``lr * weight_decay`` before the
    bias-corrected Adam move, and bumps ``params.version`` so that tapes
    recorded before the step are rejected by ``gnn.backward``.
    """

    lr: float
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step_count: int = 0
    _m: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    _v: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def step(self, params: ModelParams, grads: dict[str, np.ndarray]):
        b1, b2 = self.betas
        self.step_count += 1
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        # tensors update in name order
        for name in params.names():
            w = params.tensors[name]
            g = grads[name]
            m = self._m.setdefault(name, np.zeros_like(w))
            v = self._v.setdefault(name, np.zeros_like(w))
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            w *= 1.0 - self.lr * self.weight_decay
            w -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        params.bump()
