"""Adaptive-moment optimizer with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, NumericError


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **kw) -> AdamState:
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            **kw,
        )


def opt_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    trainable: Sequence[bool] | None = None,
) -> AdamState:
    """Update ``params`` in place. Arrays flagged non-trainable are left untouched."""
    grads = list(grads)
    if len(grads) != len(params) or len(state.m) != len(params):
        raise ConfigError("parameter, gradient and moment lists differ in length")
    offset = 0
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ConfigError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        bad = ~np.isfinite(g)
        if bad.any():
            idx = offset + int(np.flatnonzero(bad.ravel())[0])
            raise NumericError(f"non-finite gradient at flat parameter index {idx}", index=idx)
        offset += p.size
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if trainable is not None and not trainable[i]:
            continue
        if state.weight_decay:
            p -= state.lr * state.weight_decay * p
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def scheduled_lr(base: float, step: int, total: int, decay: str = "constant") -> float:
    if decay == "constant" or total <= 1:
        return base
    if decay == "cosine":
        return 0.5 * base * (1.0 + np.cos(np.pi * step / total))
    raise ConfigError(f"unknown learning-rate decay {decay!r}")
