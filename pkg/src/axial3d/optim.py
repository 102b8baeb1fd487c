"""Initialization, loss and Adam."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .tensor_core import ShapeError

PROB_CLAMP = 1e-12


def xavier_init(shape: Sequence[int], fan_in: int, fan_out: int,
                rng: np.random.Generator) -> np.ndarray:
    """Uniform samples on ``[-a, a]`` with ``a = sqrt(6 / (fan_in + fan_out))``."""
    if fan_in <= 0 or fan_out <= 0:
        raise ValueError("fans must be positive")
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=tuple(shape))


def bce_loss(p, y) -> float:
    """Mean binary cross-entropy with probabilities clamped away from 0 and 1."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeError(f"probabilities {p.shape} vs labels {y.shape}")
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(np.mean(-(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))))


def bce_grad(p, y) -> np.ndarray:
    """d(bce_loss)/dp, zero where the clamp is active."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    inside = (p > PROB_CLAMP) & (p < 1.0 - PROB_CLAMP)
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    g = -(y / pc - (1.0 - y) / (1.0 - pc)) / p.size
    return np.where(inside, g, 0.0)


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: dict[str, float] = field(default_factory=dict)
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: OptimizerState, params: Mapping[str, np.ndarray],
              grads: Mapping[str, np.ndarray]) -> None:
    """Bias-corrected Adam; updates ``params`` arrays and ``state`` in place.

    Weight decay is an L2 term added to the gradient before the moments.
    """
    if set(params) != set(grads):
        raise ShapeError(f"gradient keys {sorted(grads)} != parameter keys {sorted(params)}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {theta.shape}")
        wd = state.weight_decay.get(name, 0.0)
        if wd:
            g = g + wd * theta
        if name not in state.m:
            state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        theta -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
