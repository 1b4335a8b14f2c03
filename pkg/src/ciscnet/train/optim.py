"""RAdam with Lookahead (Ranger) and a warmup + cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidConfig, ShapeMismatch, StepOutOfRange


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 6e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lookahead_k: int = 6
    lookahead_alpha: float = 0.5

    def __post_init__(self):
        if self.lr < 0 or not 0 <= self.beta1 < 1 or not 0 < self.beta2 < 1:
            raise InvalidConfig("invalid optimizer hyperparameters")
        if self.lookahead_k < 1 or not 0 < self.lookahead_alpha <= 1:
            raise InvalidConfig("lookahead_k must be >= 1 and alpha in (0, 1]")


@dataclass(frozen=True)
class ScheduleConfig:
    warmup_steps: int = 0
    total_steps: int = 1000

    def __post_init__(self):
        if self.total_steps < 1 or not 0 <= self.warmup_steps <= self.total_steps:
            raise InvalidConfig("need 0 <= warmup_steps <= total_steps, total_steps >= 1")


@dataclass
class TrainState:
    params: dict
    slow: dict
    m: dict
    v: dict
    step: int = 0
    rng_state: dict = field(default_factory=dict)

    @classmethod
    def create(cls, params: dict) -> "TrainState":
        return cls(
            params=params,
            slow={k: p.copy() for k, p in params.items()},
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def rectification(step: int, beta2: float) -> float | None:
    """RAdam variance rectification factor, or None while rho_t <= 4."""
    rho_inf = 2.0 / (1.0 - beta2) - 1.0
    b2t = beta2**step
    rho_t = rho_inf - 2.0 * step * b2t / (1.0 - b2t)
    if rho_t <= 4.0:
        return None
    return math.sqrt(
        (rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)
    )


def optimizer_step(state: TrainState, grads: dict, lr: float, cfg: OptimizerConfig) -> TrainState:
    """One Ranger update, in place. Returns ``state``.

    Fast weights take a RAdam step (bias-corrected moments; the adaptive
    denominator is used only once the rectification term is defined).
    Every ``lookahead_k`` steps the slow weights move a fraction ``alpha``
    toward the fast weights and the fast weights are reset to them.
    """
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    r = rectification(t, b2)
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in state.params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient {name}: {g.shape} vs parameter {p.shape}")
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / bc1
        if r is None:
            p -= (lr * m_hat).astype(p.dtype, copy=False)
        else:
            denom = np.sqrt(v / bc2) + cfg.eps
            p -= (lr * r * m_hat / denom).astype(p.dtype, copy=False)
    if t % cfg.lookahead_k == 0:
        a = cfg.lookahead_alpha
        for name, p in state.params.items():
            slow = state.slow[name]
            slow += a * (p - slow)
            p[...] = slow
    return state


def lr_at(step: int, lr: float, schedule: ScheduleConfig) -> float:
    """Linear warmup from 0 to ``lr``, then cosine annealing to 0."""
    total, warm = schedule.total_steps, schedule.warmup_steps
    if not 0 <= step <= total:
        raise StepOutOfRange(f"step {step} outside [0, {total}]")
    if step < warm:
        return lr * step / warm
    if total == warm:
        return lr if step < total else 0.0
    frac = (step - warm) / (total - warm)
    return lr * 0.5 * (1.0 + math.cos(math.pi * frac))
