"""Rectified flow: straight-line regression, Euler sampling, reflow, straightness.

Convention: the prior sits at ``t = 0`` and the target at ``t = 1``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import distributions as dist
from .errors import ConfigError, DivergenceError, NumericError
from .nn import GradientBuffer, VelocityNet, backward
from .optim import AdamState, opt_step, scheduled_lr
from .rng import RngState, as_generator

log = logging.getLogger(__name__)

Field = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass
class PairBatch:
    x0: np.ndarray
    x1: np.ndarray
    cond: np.ndarray | None = None

    def __post_init__(self):
        self.x0 = np.atleast_2d(np.asarray(self.x0, dtype=np.float64))
        self.x1 = np.atleast_2d(np.asarray(self.x1, dtype=np.float64))
        if self.x0.shape != self.x1.shape:
            raise ConfigError(f"pair shapes differ: {self.x0.shape} vs {self.x1.shape}")
        if self.cond is not None:
            self.cond = np.atleast_2d(np.asarray(self.cond, dtype=np.float64))
            if self.cond.shape[0] != self.x0.shape[0]:
                raise ConfigError("condition rows must match pair rows")

    def __len__(self) -> int:
        return self.x0.shape[0]

    def rows(self, idx) -> PairBatch:
        cond = None if self.cond is None else self.cond[idx]
        return PairBatch(self.x0[idx], self.x1[idx], cond)


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 256
    lr: float = 1e-3
    seed: int = 0
    weight_decay: float = 0.0
    time_law: str = "uniform"
    lr_decay: str = "constant"

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or not self.lr > 0:
            raise ConfigError(f"invalid training config {self}")
        if self.time_law != "uniform":
            raise ConfigError(f"unsupported time law {self.time_law!r}")


@dataclass
class TrainResult:
    net: VelocityNet
    losses: list[float] = field(default_factory=list)


class EvalCounter:
    """Wraps a velocity field and counts per-sample evaluations."""

    def __init__(self, fn: Field):
        self.fn = fn
        self.calls = 0
        self.evaluations = 0

    def __call__(self, x, t):
        self.calls += 1
        self.evaluations += np.atleast_2d(x).shape[0]
        return self.fn(x, t)


def as_field(model, cond=None) -> Field:
    if isinstance(model, VelocityNet):
        return lambda x, t: model.forward(x, t, cond)
    if callable(model):
        return model
    raise ConfigError(f"cannot use {type(model).__name__} as a velocity field")


def interpolate(x0, x1, t) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ConfigError(f"shape mismatch {x0.shape} vs {x1.shape}")
    t = np.asarray(t, dtype=np.float64)
    if np.any((t < 0) | (t > 1)):
        raise ConfigError("interpolation time outside [0, 1]")
    if t.ndim == 1 and x0.ndim == 2:
        t = t[:, None]
    return (1.0 - t) * x0 + t * x1


def regression_loss(
    net: VelocityNet,
    xt: np.ndarray,
    times: np.ndarray,
    cond: np.ndarray | None,
    target: np.ndarray,
    adapters=None,
    with_grad: bool = True,
) -> tuple[float, GradientBuffer | None]:
    """Mean over rows of ``||target - v(xt, t)||^2`` and its parameter gradient."""
    v, rec = net.forward_record(xt, times, cond, adapters)
    if not np.all(np.isfinite(v)):
        raise NumericError("network output is not finite")
    resid = target - v
    n = resid.shape[0]
    loss = float(np.sum(resid * resid) / n)
    if not with_grad:
        return loss, None
    g = backward(net, rec, -2.0 * resid / n)
    return loss, (g.params if adapters is None else g.adapters)


def rf_loss(net: VelocityNet, batch: PairBatch, times, with_grad: bool = False):
    times = np.broadcast_to(np.asarray(times, dtype=np.float64).reshape(-1), (len(batch),))
    xt = interpolate(batch.x0, batch.x1, times)
    loss, g = regression_loss(net, xt, times, batch.cond, batch.x1 - batch.x0, with_grad=with_grad)
    return (loss, g) if with_grad else loss


class _DivergenceGuard:
    def __init__(self, factor: float = 1e3, patience: int = 100):
        self.factor, self.patience = factor, patience
        self.initial: float | None = None
        self.run = 0

    def check(self, loss: float, step: int) -> None:
        if not np.isfinite(loss):
            raise NumericError(f"non-finite training loss at step {step}", index=step)
        if self.initial is None:
            self.initial = loss
            return
        self.run = self.run + 1 if loss > self.factor * self.initial else 0
        if self.run >= self.patience:
            raise DivergenceError(f"training diverged at step {step}", index=step)


def train_rectified_flow(
    net: VelocityNet,
    prior: dist.DistributionSpec,
    target: dist.DistributionSpec | None,
    cfg: TrainConfig,
    pairs: PairBatch | None = None,
    correction: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
) -> TrainResult:
    """Minimise the straight-line regression loss in place on ``net``.

    Pairs are drawn independently from ``prior`` and ``target`` unless a fixed
    coupling ``pairs`` is given (reflow). ``correction(xt, t)``, when given, is
    subtracted from the regression target.
    """
    if pairs is None and target is None:
        raise ConfigError("either a target distribution or a fixed coupling is required")
    root = RngState(cfg.seed).child("flow", "train")
    gen = root.generator()
    state = AdamState.for_params(net.params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    guard = _DivergenceGuard()
    losses: list[float] = []
    for step in range(cfg.steps):
        state.lr = scheduled_lr(cfg.lr, step, cfg.steps, cfg.lr_decay)
        if pairs is None:
            x0 = dist.sample(prior, cfg.batch_size, gen)
            x1 = dist.sample(target, cfg.batch_size, gen)
            cond = None
        else:
            idx = gen.integers(0, len(pairs), size=cfg.batch_size)
            x0, x1 = pairs.x0[idx], pairs.x1[idx]
            cond = None if pairs.cond is None else pairs.cond[idx]
        t = gen.uniform(0.0, 1.0, size=cfg.batch_size)
        xt = interpolate(x0, x1, t)
        goal = x1 - x0
        if correction is not None:
            goal = goal - correction(xt, t)
        loss, grads = regression_loss(net, xt, t, cond, goal)
        guard.check(loss, step)
        opt_step(net.params, grads.arrays, state)
        losses.append(loss)
    if losses:
        log.debug("rectified flow: %d steps, final loss %.4g", cfg.steps, losses[-1])
    return TrainResult(net, losses)


def euler_sample(model, x0, n_steps: int, cond=None, counter: EvalCounter | None = None) -> np.ndarray:
    """Explicit Euler on the uniform grid ``t_i = i / n_steps``."""
    if n_steps < 1:
        raise ConfigError("n_steps must be >= 1")
    fn = counter if counter is not None else as_field(model, cond)
    x = np.array(x0, dtype=np.float64, copy=True)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    dt = 1.0 / n_steps
    t_max = 1.0 - dt
    for i in range(n_steps):
        t = min(i * dt, t_max)
        x = x + dt * fn(x, np.full(x.shape[0], t))
        if not np.all(np.isfinite(x)):
            raise NumericError(f"non-finite state after Euler step {i}", index=i)
    return x[0] if single else x


def one_step(model, x0, cond=None) -> np.ndarray:
    """The distilled one-step map ``x0 + v(x0, 0)``."""
    return euler_sample(model, x0, 1, cond)


def reflow_repair(
    net: VelocityNet,
    prior: dist.DistributionSpec,
    n: int,
    rng: RngState | np.random.Generator | int,
    n_steps: int = 50,
    cond=None,
) -> PairBatch:
    x0 = dist.sample(prior, n, as_generator(rng))
    return PairBatch(x0, euler_sample(net, x0, n_steps, cond), cond)


def straightness(model, pairs: PairBatch, grid_size: int = 16) -> float:
    """Mean over pairs and grid times of ``||(x1 - x0) - v(x_t, t)||^2``."""
    if grid_size < 2:
        raise ConfigError("grid_size must be >= 2")
    fn = as_field(model, pairs.cond)
    disp = pairs.x1 - pairs.x0
    total = 0.0
    for t in np.linspace(0.0, 1.0, grid_size):
        xt = interpolate(pairs.x0, pairs.x1, t)
        r = disp - fn(xt, np.full(len(pairs), t))
        total += float(np.mean(np.sum(r * r, axis=1)))
    return total / grid_size
