"""AdamW, cosine schedule with warmup, and the two clipping regimes.

The learning rate ramps linearly from zero over the warmup, then
follows a half cosine from the base rate down to min_lr_ratio times it.
Rotation parameters take the same schedule scaled by a constant factor.

Gradient clipping is a single global 2-norm threshold, normally the
configured clip norm; for a short window after every merge the
threshold restarts low and ramps back up, damping the shock of freshly
resampled permutations, and this softened regime is only active during
the early part of training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericsError


@dataclass
class ScheduleConfig:
    base_lr: float
    total_steps: int
    warmup_steps: int = 0
    min_lr_ratio: float = 0.01
    poet_lr_scale: float = 0.5
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    post_merge_clip_start: float = 0.01
    post_merge_clip_ramp: int = 10
    post_merge_clip_window: int = 2000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.warmup_steps >= self.total_steps:
            raise ConfigError("warmup_steps must be below total_steps")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ConfigError("betas must lie in (0, 1)")


def lr_at(step: int, sched: ScheduleConfig, poet: bool = False) -> float:
    """Learning rate at a global step (0-based)."""
    if step < 0:
        raise ConfigError(f"negative step {step}")
    scale = sched.poet_lr_scale if poet else 1.0
    if sched.warmup_steps > 0 and step < sched.warmup_steps:
        return scale * sched.base_lr * step / sched.warmup_steps
    floor = sched.min_lr_ratio * sched.base_lr
    span = sched.total_steps - sched.warmup_steps
    progress = min(1.0, (step - sched.warmup_steps) / span)
    cos = 0.5 * (1.0 + math.cos(math.pi * progress))
    return scale * (floor + (sched.base_lr - floor) * cos)


def clip_threshold_at(global_step: int, steps_since_merge: int | None, sched: ScheduleConfig) -> float:
    """Global-norm threshold; ramped after merges early in training.

    ``steps_since_merge`` is 0 on the first step following a merge and
    None before any merge has happened.
    """
    if (
        steps_since_merge is not None
        and global_step < sched.post_merge_clip_window
        and steps_since_merge < sched.post_merge_clip_ramp
    ):
        frac = steps_since_merge / sched.post_merge_clip_ramp
        return sched.post_merge_clip_start + (sched.clip_norm - sched.post_merge_clip_start) * frac
    return sched.clip_norm


def global_grad_norm(grads: dict) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    return math.sqrt(total)


def global_clip(grads: dict, threshold: float) -> float:
    """Scale all gradients in place to the threshold; returns the
    pre-clip norm.  Non-finite gradients are an abort, not a clamp."""
    norm = global_grad_norm(grads)
    if not math.isfinite(norm):
        raise NumericsError(f"non-finite gradient norm {norm}")
    if norm > threshold and norm > 0.0:
        factor = threshold / norm
        for g in grads.values():
            g *= g.dtype.type(factor)
    return norm


@dataclass
class AdamWState:
    """Two moment buffers per parameter plus a shared step count.

    Moments are allocated in the parameter dtype, so state bytes are
    exactly twice the trainable parameter bytes."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    def nbytes(self) -> int:
        return sum(a.nbytes for a in self.m.values()) + sum(a.nbytes for a in self.v.values())

    def reset(self) -> None:
        for a in self.m.values():
            a[...] = 0.0
        for a in self.v.values():
            a[...] = 0.0
        self.t = 0


def adamw_init(params: dict) -> AdamWState:
    state = AdamWState()
    for name, p in params.items():
        state.m[name] = np.zeros_like(p)
        state.v[name] = np.zeros_like(p)
    return state


def adamw_step(params: dict, grads: dict, state: AdamWState, lr: float, sched: ScheduleConfig) -> None:
    """One decoupled-weight-decay Adam update, in place."""
    state.t += 1
    bc1 = 1.0 - sched.beta1**state.t
    bc2 = 1.0 - sched.beta2**state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise NumericsError(f"gradient shape {g.shape} != param shape {p.shape} for {name}")
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient for {name}")
        m, v = state.m[name], state.v[name]
        one = p.dtype.type(1.0)
        m *= p.dtype.type(sched.beta1)
        m += (one - p.dtype.type(sched.beta1)) * g
        v *= p.dtype.type(sched.beta2)
        v += (one - p.dtype.type(sched.beta2)) * g * g
        mhat = m / p.dtype.type(bc1)
        vhat = v / p.dtype.type(bc2)
        # decoupled decay first, then the adaptive step
        p *= one - p.dtype.type(lr * sched.weight_decay)
        p -= p.dtype.type(lr) * mhat / (np.sqrt(vhat) + p.dtype.type(sched.eps))
