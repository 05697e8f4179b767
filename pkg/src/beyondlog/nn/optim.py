from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .params import ParamStore


@dataclass(frozen=True)
class OptimConfig:
    learning_rate: float = 0.0075
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    warmup_steps: int = 100
    total_steps: int = 2000
    min_lr_fraction: float = 0.0

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps must not exceed total_steps")


def lr_schedule(step: int, cfg: OptimConfig) -> float:
    """Linear warmup to the base rate, then cosine annealing to ``min_lr_fraction``."""
    base = cfg.learning_rate
    if step < cfg.warmup_steps:
        return base * step / cfg.warmup_steps
    decay_steps = cfg.total_steps - cfg.warmup_steps
    if decay_steps <= 0:
        return base
    progress = min(1.0, (step - cfg.warmup_steps) / decay_steps)
    floor = cfg.min_lr_fraction * base
    return floor + (base - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


def adam_step(params: ParamStore, grads: dict[str, np.ndarray], cfg: OptimConfig, step: int,
              lr: float | None = None) -> ParamStore:
    """One in-place Adam update with bias correction.

    ``step`` drives the learning-rate schedule; bias correction uses each
    parameter's own update counter. Zero gradients leave values untouched.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter has {params[name].shape}")
    rate = lr_schedule(step, cfg) if lr is None else lr
    for name, g in grads.items():
        p = params.params[name]
        st = params.state[name]
        st.step += 1
        st.m *= cfg.beta1
        st.m += (1.0 - cfg.beta1) * g
        st.v *= cfg.beta2
        st.v += (1.0 - cfg.beta2) * (g * g)
        if not np.any(g):
            # moments decay only
            continue
        m_hat = st.m / (1.0 - cfg.beta1 ** st.step)
        v_hat = st.v / (1.0 - cfg.beta2 ** st.step)
        p -= (rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)).astype(p.dtype)
    return params
