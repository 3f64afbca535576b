"""Adam with bias correction."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor


class NonFiniteGradientError(FloatingPointError):
    pass


class AdamState:
    def __init__(self, params: Sequence[Tensor], lr: float = 2e-4, beta1: float = 0.0,
                 beta2: float = 0.9, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros(p.shape) for p in params]
        self.v = [np.zeros(p.shape) for p in params]
        self.step_count = 0


def adam_step(state: AdamState, params: Sequence[Tensor], grads: Sequence) -> None:
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ValueError("parameter, gradient and moment lists must line up")
    garrs = [g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64) for g in grads]
    for i, g in enumerate(garrs):
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for parameter {i} (shape {g.shape})")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i, (p, g) in enumerate(zip(params, garrs)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
