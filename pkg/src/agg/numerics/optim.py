"""ADAM with bias correction and global-norm gradient clipping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from agg.errors import ConfigurationError, TrainingDivergenceError
from agg.numerics.tensor import ParameterStore


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "AdamState":
        return AdamState(self.beta1, self.beta2, self.eps, self.t,
                         {k: a.copy() for k, a in self.m.items()},
                         {k: a.copy() for k, a in self.v.items()})


def global_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for name in grads:
        g = grads[name]
        total += float(np.dot(g.reshape(-1), g.reshape(-1)))
    return float(np.sqrt(total))


def clip_global_norm(grads: dict[str, np.ndarray], c: float) -> dict[str, np.ndarray]:
    """Scale every gradient by c/||g|| when the joint L2 norm exceeds ``c``."""
    if c <= 0:
        raise ConfigurationError(f"clip_global_norm: threshold must be positive, got {c}")
    norm = global_norm(grads)
    if norm <= c:
        return dict(grads)
    scale = c / norm
    return {k: g * scale for k, g in grads.items()}


def adam_step(params: ParameterStore, grads: dict[str, np.ndarray], state: AdamState,
              lr: float) -> AdamState:
    """Apply one bias-corrected ADAM update in place and advance the step counter."""
    if lr <= 0:
        raise ConfigurationError(f"adam_step: lr must be positive, got {lr}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(f"non-finite gradient for {name}", step=state.t + 1, lr=lr)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p in params:
        g = grads.get(p.name)
        if g is None:
            continue
        if g.shape != p.value.shape:
            raise ConfigurationError(f"adam_step: grad {g.shape} vs parameter {p.name} {p.shape}")
        m = state.m.get(p.name)
        if m is None:
            m = np.zeros_like(p.value)
            state.v[p.name] = np.zeros_like(p.value)
        v = state.v[p.name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[p.name] = m
        state.v[p.name] = v
        p.value = p.value - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state
