"""Adam/AdamW updates, warmup-cosine schedule, clipping and lr groups."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .model import FrozenParameterError, ModelParams


@dataclass
class OptimizerState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    decoupled: bool = True
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def hyperparameters(self) -> dict:
        return {k: getattr(self, k) for k in ("lr", "beta1", "beta2", "eps", "weight_decay", "decoupled")}


@dataclass(frozen=True)
class ScheduleConfig:
    start_lr: float = 1e-5
    peak_lr: float = 1e-4
    end_lr: float = 1e-5
    warmup_epochs: int = 10
    total_epochs: int = 100
    steps_per_epoch: int = 1

    def __post_init__(self):
        if self.start_lr > self.peak_lr:
            raise ValueError("start_lr must not exceed peak_lr")
        if not 0 <= self.warmup_epochs <= self.total_epochs:
            raise ValueError("warmup_epochs must lie in [0, total_epochs]")
        if self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be >= 1")


def lr_at(step: int, sched: ScheduleConfig) -> float:
    """Linear warmup to the peak, then cosine decay to ``end_lr``; clamps past the end."""
    warmup = sched.warmup_epochs * sched.steps_per_epoch
    total = sched.total_epochs * sched.steps_per_epoch
    if step < warmup:
        return sched.start_lr + (sched.peak_lr - sched.start_lr) * step / warmup
    if step >= total:
        return sched.end_lr
    progress = (step - warmup) / (total - warmup)
    return sched.end_lr + (sched.peak_lr - sched.end_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


def param_group_scaling(names, groups: Mapping[str, float], base_lr: float) -> dict:
    """Effective lr per tensor; a name takes the multiplier of its longest matching prefix."""
    out = {}
    for name in names:
        best, mult = -1, 1.0
        for prefix, m in groups.items():
            if (name == prefix or name.startswith(prefix + ".")) and len(prefix) > best:
                best, mult = len(prefix), m
        out[name] = base_lr * mult
    return out


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_global_norm(grads: Mapping[str, np.ndarray], max_norm: float):
    """Rescale all gradients when their joint L2 norm exceeds ``max_norm``.

    Returns ``(grads, norm_before)``; below the threshold the input arrays are
    returned untouched.
    """
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0:
        return dict(grads), norm
    scale = max_norm / norm
    return {k: (g * scale).astype(g.dtype) for k, g in grads.items()}, norm


def adaptive_moment_step(params: ModelParams, grads: Mapping[str, np.ndarray], state: OptimizerState,
                         lrs: Optional[Mapping[str, float]] = None) -> ModelParams:
    """One Adam (``decoupled=False``) or AdamW step, in place.

    ``lrs`` overrides ``state.lr`` per tensor (see :func:`param_group_scaling`).
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if isinstance(params, ModelParams) and params.is_frozen(name):
            raise FrozenParameterError(f"refusing to update frozen parameter {name!r}")
        if params[name].shape != np.shape(g):
            raise ValueError(f"gradient shape {np.shape(g)} does not match parameter {name!r}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name!r}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        lr = state.lr if lrs is None else lrs[name]
        if state.weight_decay and not state.decoupled:
            g = g + state.weight_decay * p
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        if state.weight_decay and state.decoupled:
            p *= 1.0 - lr * state.weight_decay
        p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(p.dtype)
    return params
