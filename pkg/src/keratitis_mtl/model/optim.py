"""Adam with bias correction; weight decay is added to the gradient."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, weight_decay: float = 0.0, skip=()) -> tuple[dict, AdamState]:
    """Return updated parameters and state; inputs are left untouched.

    Keys in ``skip`` (frozen parameters) are copied through and their moments
    are not advanced.
    """
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    m, v = dict(state.m), dict(state.v)
    new_params = {}
    for k, theta in params.items():
        if k in skip or k not in grads:
            new_params[k] = theta
            continue
        g = grads[k] + weight_decay * theta if weight_decay else grads[k]
        m[k] = b1 * m.get(k, 0.0) + (1 - b1) * g
        v[k] = b2 * v.get(k, 0.0) + (1 - b2) * g * g
        m_hat = m[k] / (1 - b1 ** t)
        v_hat = v[k] / (1 - b2 ** t)
        new_params[k] = theta - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, AdamState(b1, b2, state.eps, t, m, v)
