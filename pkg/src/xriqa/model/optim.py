"""NAdam with per-parameter-group L2 gradient clipping.

Each gradient tensor is clipped to the norm budget first, then folded into
the exponential moments; the Nesterov-style estimate mixes the bias-corrected
momentum with the current gradient:

    m_hat = beta1 * m / (1 - beta1^(t+1)) + (1 - beta1) * g / (1 - beta1^t)
    v_hat = v / (1 - beta2^t)
    theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


def clip_by_norm(g: np.ndarray, clipnorm: float) -> np.ndarray:
    """Scale g so its L2 norm is at most clipnorm (no-op for zero gradients)."""
    norm = float(np.sqrt((g * g).sum()))
    if norm > clipnorm:
        return g * (clipnorm / norm)
    return g


@dataclass
class NadamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    clipnorm: float = 1.0

    def __post_init__(self):
        if self.clipnorm <= 0:
            raise ValueError("clipnorm must be > 0")


@dataclass
class NadamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def nadam_step(tensors: dict[str, Tensor], grads: dict[str, np.ndarray],
               t: int, cfg: NadamConfig, state: NadamState) -> None:
    """Apply one update (step index t >= 1) in place; moments live in state."""
    if t < 1:
        raise ValueError("step index t starts at 1")
    for name, tensor in tensors.items():
        g = clip_by_norm(np.asarray(grads[name], dtype=np.float64), cfg.clipnorm)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(tensor.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(tensor.data)
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        m_hat = (cfg.beta1 * m / (1.0 - cfg.beta1 ** (t + 1))
                 + (1.0 - cfg.beta1) * g / (1.0 - cfg.beta1 ** t))
        v_hat = v / (1.0 - cfg.beta2 ** t)
        tensor.data = tensor.data - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
