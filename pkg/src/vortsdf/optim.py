"""Bias-corrected Adam on plain numpy arrays."""

from __future__ import annotations

import numpy as np


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update. ``state`` is a dict holding ``m``, ``v`` and ``t``;
    missing entries are initialized. Returns the updated parameters."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise ValueError(f"shape mismatch: params {params.shape} vs grads {grads.shape}")
    if "m" not in state:
        state["m"] = np.zeros_like(params)
        state["v"] = np.zeros_like(params)
        state["t"] = 0
    if state["m"].shape != params.shape:
        raise ValueError("optimizer state does not match parameter shape")
    state["t"] += 1
    t = state["t"]
    m, v = state["m"], state["v"]
    m *= beta1
    m += (1.0 - beta1) * grads
    v *= beta2
    v += (1.0 - beta2) * grads * grads
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    """Stateful wrapper around :func:`adam_step` for one parameter array."""

    def __init__(self, shape, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = {"m": np.zeros(shape), "v": np.zeros(shape), "t": 0}

    def step(self, params, grads):
        return adam_step(params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)
