"""AdamW with decoupled weight decay, global-norm clipping, and the WSD schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ConfigurationError, DimensionError, NumericError
from .ndauto import Tensor


@dataclass(frozen=True)
class WsdSchedule:
    """Warmup-Stable-Decay learning rate.

    Linear warmup from ``floor_fraction * max_lr`` at step 0 to ``max_lr`` at
    ``warmup_steps``, constant until ``stable_end``, then linear decay over
    ``decay_steps`` back to the floor, which holds afterwards. Setting
    ``floor_fraction=0`` gives a warmup that starts at zero.
    """

    warmup_steps: int
    stable_end: int
    decay_steps: int
    max_lr: float = 5e-4
    floor_fraction: float = 0.1

    def __post_init__(self):
        if not 0 < self.warmup_steps <= self.stable_end:
            raise ConfigurationError(f"need 0 < warmup_steps <= stable_end, got "
                                     f"{self.warmup_steps}, {self.stable_end}")
        if self.decay_steps <= 0:
            raise ConfigurationError(f"decay_steps must be positive, got {self.decay_steps}")
        if not 0 <= self.floor_fraction < 1:
            raise ConfigurationError(f"floor_fraction must lie in [0, 1), got {self.floor_fraction}")
        if self.max_lr <= 0:
            raise ConfigurationError(f"max_lr must be positive, got {self.max_lr}")

    @property
    def total_steps(self) -> int:
        return self.stable_end + self.decay_steps

    def __call__(self, step: int) -> float:
        return wsd_lr(step, self)


def wsd_lr(step: int, sch: WsdSchedule) -> float:
    if step < 0:
        raise ConfigurationError(f"step must be >= 0, got {step}")
    eta, lo = sch.max_lr, sch.floor_fraction
    if step < sch.warmup_steps:
        return eta * (lo + (1.0 - lo) * step / sch.warmup_steps)
    if step <= sch.stable_end:
        return eta
    if step < sch.stable_end + sch.decay_steps:
        return eta * (1.0 - (1.0 - lo) * (step - sch.stable_end) / sch.decay_steps)
    return eta * lo


def clip_grad_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the applied scale (1.0 when no clipping happened).
    """
    if max_norm <= 0:
        raise ConfigurationError(f"max_norm must be positive, got {max_norm}")
    total = 0.0
    for name, g in grads.items():
        sq = float(np.sum(np.square(g, dtype=np.float64)))
        if not math.isfinite(sq):
            raise NumericError(f"non-finite gradient in parameter {name!r}")
        total += sq
    norm = math.sqrt(total)
    if norm <= max_norm:
        return 1.0
    scale = max_norm / norm
    for g in grads.values():
        g *= g.dtype.type(scale)
    return scale


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, Tensor]) -> "AdamWState":
        return cls(m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()})


def adamw_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamWState,
               lr: float, beta1: float = 0.9, beta2: float = 0.95, eps: float = 1e-8,
               weight_decay: float = 0.1) -> AdamWState:
    """One AdamW update, in place on ``params`` and ``state``.

    theta <- theta - lr * wd * theta - lr * m_hat / (sqrt(v_hat) + eps)
    """
    if not (0 <= beta1 < 1 and 0 <= beta2 < 1) or eps <= 0 or weight_decay < 0 or lr < 0:
        raise ConfigurationError("invalid AdamW hyperparameters")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        if m.shape != p.shape:
            raise DimensionError(f"optimizer state for {name!r} has shape {m.shape}, parameter {p.shape}")
        dt = p.dtype.type
        m *= dt(beta1)
        m += dt(1.0 - beta1) * g
        v *= dt(beta2)
        v += dt(1.0 - beta2) * g * g
        step = (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(eps))
        p.data -= dt(lr * weight_decay) * p.data + dt(lr) * step
    return state


@dataclass
class AdamW:
    """Thin stateful wrapper pairing hyperparameters with :class:`AdamWState`."""

    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    state: AdamWState = field(default_factory=AdamWState)

    def step(self, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], lr: float) -> None:
        adamw_step(params, grads, self.state, lr, self.beta1, self.beta2, self.eps, self.weight_decay)
