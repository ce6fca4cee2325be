from __future__ import annotations

import numpy as np

from .net import NetState


def adam_step(state: NetState, grads, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> NetState:
    """Bias-corrected Adam update, applied in place. Returns ``state``."""
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for p, g, m, v in zip(state.params, grads, state.m, state.v):
        for name, param in p.items():
            grad = g.get(name)
            if grad is None:
                continue
            if grad.shape != param.shape:
                raise ValueError(f"gradient for {name} has shape {grad.shape}, parameter {param.shape}")
            m[name] = beta1 * m[name] + (1.0 - beta1) * grad
            v[name] = beta2 * v[name] + (1.0 - beta2) * grad * grad
            p[name] = param - lr * (m[name] / bc1) / (np.sqrt(v[name] / bc2) + eps)
    return state
