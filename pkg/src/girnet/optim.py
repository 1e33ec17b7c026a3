"""Adam with bias correction and the step-decay learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .autodiff import Tensor

BASE_LR = 1e-4
DECAY_EVERY = 60
DECAY_FACTOR = 0.5


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.5
    beta2: float = 0.99
    eps: float = 1e-8
    base_lr: float = BASE_LR

    @classmethod
    def for_params(cls, params: Mapping[str, Tensor], **kw) -> "OptimState":
        state = cls(**kw)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def lr_schedule(epoch: int, base_lr: float = BASE_LR, every: int = DECAY_EVERY, factor: float = DECAY_FACTOR) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return base_lr * factor ** (epoch // every)


def adam_step(
    params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: OptimState, lr: float
) -> dict[str, Tensor]:
    """One bias-corrected Adam update; returns new parameter tensors, updates ``state``."""
    missing = [k for k in params if k not in grads]
    if missing:
        raise KeyError(f"no gradient for parameters: {missing[:5]}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**state.t
    corr2 = 1.0 - b2**state.t
    out = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=p.dtype)
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} vs parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g)
        state.m[name] = m.astype(p.dtype, copy=False)
        state.v[name] = v.astype(p.dtype, copy=False)
        m_hat = m / corr1
        v_hat = v / corr2
        new = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        out[name] = Tensor(new.astype(p.dtype, copy=False), requires_grad=True)
    return out
