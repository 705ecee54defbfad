from __future__ import annotations

import numpy as np

from .tensor import Parameter


def adam_step(params: list[Parameter], lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update; consumes and clears each ``grad``.

    Parameters that received no gradient are left untouched (their step
    counter does not advance).
    """
    for p in params:
        if p.grad is None:
            continue
        g = p.grad.astype(np.float64)
        p.step += 1
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * g * g
        m_hat = p.m / (1.0 - beta1**p.step)
        v_hat = p.v / (1.0 - beta2**p.step)
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)
        p.grad = None


def zero_grad(params: list[Parameter]) -> None:
    for p in params:
        p.grad = None
