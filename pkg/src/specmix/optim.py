"""Adam with bias correction, operating on named parameter tensors."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr=0.002, beta1=0.7,
              beta2=0.999, eps=1e-8) -> AdamState:
    """Apply one Adam update to each ``params[name].data``.

    Parameter arrays are replaced, never written in place, so arrays handed
    out earlier keep their values. Missing gradients count as zero.
    """
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state


class Adam:
    def __init__(self, params: dict, lr=0.002, beta1=0.7, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState()

    def step(self, grads: dict):
        adam_step(self.params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)
