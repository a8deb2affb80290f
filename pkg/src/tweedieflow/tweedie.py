"""Tweedie posterior means and the score-corrected rectified flow.

The correction adds ``(1 - alpha_bar(t)) * grad log p_t(x)`` to the velocity,
where ``p_t`` is the law of the interpolation ``(1 - t) x0 + t x1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Union

import numpy as np

from . import distributions as dist
from .errors import ConfigError, NumericError
from .flow import EvalCounter, PairBatch, TrainConfig, TrainResult, _DivergenceGuard, as_field, interpolate, regression_loss
from .nn import VelocityNet, backward
from .optim import AdamState, opt_step
from .rng import RngState


@dataclass(frozen=True)
class RectifiedLinear:
    """``1 - alpha_bar(t) = (1 - t)^2``."""

    kind = "rectified_linear"

    def __call__(self, t):
        return 1.0 - (1.0 - t) ** 2


@dataclass(frozen=True)
class DdpmCosine:
    """Cosine schedule evaluated at diffusion time ``1 - t``."""

    s: float = 0.008
    kind = "ddpm_cosine"

    def __call__(self, t):
        u = 1.0 - t
        f = np.cos((u + self.s) / (1.0 + self.s) * np.pi / 2.0) ** 2
        f0 = np.cos(self.s / (1.0 + self.s) * np.pi / 2.0) ** 2
        return np.clip(f / f0, 0.0, 1.0)


@dataclass(frozen=True, eq=False)
class Custom:
    """Piecewise-linear interpolation of a monotone ``(t, alpha_bar)`` table."""

    times: tuple[float, ...]
    values: tuple[float, ...]
    kind = "custom"

    def __post_init__(self):
        ts = np.asarray(self.times, dtype=np.float64)
        vs = np.asarray(self.values, dtype=np.float64)
        if ts.ndim != 1 or ts.shape != vs.shape or ts.size < 2:
            raise ConfigError("schedule table needs matching time/value columns with >= 2 rows")
        if ts[0] != 0.0 or ts[-1] != 1.0 or np.any(np.diff(ts) <= 0):
            raise ConfigError("schedule times must increase strictly from 0 to 1")
        if np.any((vs < 0) | (vs > 1)) or np.any(np.diff(vs) < 0):
            raise ConfigError("alpha_bar values must be nondecreasing within [0, 1]")
        if vs[-1] != 1.0:
            raise ConfigError("alpha_bar must equal 1 at t = 1")
        object.__setattr__(self, "times", tuple(ts))
        object.__setattr__(self, "values", tuple(vs))

    @classmethod
    def constant_one(cls) -> Custom:
        """The degenerate schedule under which every correction vanishes."""
        return cls((0.0, 1.0), (1.0, 1.0))

    def __call__(self, t):
        return np.interp(t, self.times, self.values)


Schedule = Union[RectifiedLinear, DdpmCosine, Custom]


def alpha_bar(schedule: Schedule, t):
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any((t_arr < 0) | (t_arr > 1)) or not np.all(np.isfinite(t_arr)):
        raise ConfigError(f"time outside [0, 1]: {t}")
    out = schedule(t_arr)
    return float(out) if np.ndim(out) == 0 else out


def correction_coeff(schedule: Schedule, t):
    """``1 - alpha_bar(t)``."""
    a = alpha_bar(schedule, t)
    return 1.0 - a


def schedule_from_config(cfg: dict) -> Schedule:
    kind = cfg.get("kind", "rectified_linear")
    if kind == "rectified_linear":
        return RectifiedLinear()
    if kind == "ddpm_cosine":
        return DdpmCosine(float(cfg.get("s", 0.008)))
    if kind == "custom":
        table = cfg["table"]
        return Custom(tuple(r[0] for r in table), tuple(r[1] for r in table))
    raise ConfigError(f"unknown schedule kind {kind!r}")


class ScoreSource(Protocol):
    dim: int

    def score(self, x: np.ndarray, t) -> np.ndarray: ...


@dataclass(frozen=True, eq=False)
class AnalyticScore:
    prior: dist.IsotropicGaussian
    target: dist.DistributionSpec

    @property
    def dim(self) -> int:
        return self.prior.dim

    def score(self, x, t):
        return dist.marginal_interp_score(self.prior, self.target, x, t)


@dataclass(frozen=True, eq=False)
class LearnedScore:
    net: VelocityNet

    @property
    def dim(self) -> int:
        return self.net.config.dim

    def score(self, x, t):
        return self.net.forward(x, t)


def tweedie_posterior_mean(z, coeff: float, score_at_z) -> np.ndarray:
    """``E[mu | z] = z + coeff * score(z)`` for noise covariance ``coeff * I``."""
    z = np.asarray(z, dtype=np.float64)
    s = np.asarray(score_at_z, dtype=np.float64)
    if z.shape != s.shape:
        raise ConfigError(f"shape mismatch {z.shape} vs {s.shape}")
    coeff = np.asarray(coeff, dtype=np.float64)
    if np.any(coeff < 0):
        raise ConfigError("Tweedie coefficient must be nonnegative")
    if coeff.ndim == 1 and z.ndim == 2:
        coeff = coeff[:, None]
    return z + coeff * s


def _checked_score(source: ScoreSource, x, t) -> np.ndarray:
    s = source.score(x, t)
    if not np.all(np.isfinite(s)):
        raise NumericError("score is not finite")
    return s


def correction_term(schedule: Schedule, source: ScoreSource, x, t) -> np.ndarray:
    """``(1 - alpha_bar(t)) * score(x, t)`` row-wise."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (x.shape[0],))
    c = np.asarray(correction_coeff(schedule, t)).reshape(-1, 1)
    return c * _checked_score(source, x, t)


def corrected_rf_loss(net, batch: PairBatch, times, schedule: Schedule, source: ScoreSource, with_grad: bool = False):
    times = np.broadcast_to(np.asarray(times, dtype=np.float64).reshape(-1), (len(batch),))
    xt = interpolate(batch.x0, batch.x1, times)
    goal = (batch.x1 - batch.x0) - correction_term(schedule, source, xt, times)
    loss, g = regression_loss(net, xt, times, batch.cond, goal, with_grad=with_grad)
    return (loss, g) if with_grad else loss


def corrected_field(model, schedule: Schedule, source: ScoreSource, cond=None):
    fn = as_field(model, cond)

    def drift(x, t):
        return fn(x, t) + correction_term(schedule, source, x, t)

    return drift


def corrected_ode_step(model, x, t: float, dt: float, schedule: Schedule, source: ScoreSource, cond=None) -> np.ndarray:
    """One explicit Euler step of ``v(x, t) + (1 - alpha_bar(t)) score(x, t)``."""
    if not (0.0 <= t <= 1.0 and 0.0 <= t + dt <= 1.0 + 1e-12):
        raise ConfigError(f"step [{t}, {t + dt}] leaves [0, 1]")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    tt = np.full(xb.shape[0], float(t))
    v = as_field(model, cond)(xb, tt)
    drift = v + correction_term(schedule, source, xb, tt)
    if not np.all(np.isfinite(drift)):
        raise NumericError(f"non-finite corrected drift at t={t}")
    out = xb + dt * drift
    return out[0] if single else out


def corrected_one_step(model, x0, schedule: Schedule, source: ScoreSource, cond=None) -> np.ndarray:
    """``x0 + v(x0, 0) + (1 - alpha_bar(0)) score(x0, 0)``: a single unit Euler step."""
    return corrected_ode_step(model, x0, 0.0, 1.0, schedule, source, cond)


def corrected_euler_sample(
    model,
    x0,
    n_steps: int,
    schedule: Schedule,
    source: ScoreSource,
    cond=None,
    counter: EvalCounter | None = None,
) -> np.ndarray:
    if n_steps < 1:
        raise ConfigError("n_steps must be >= 1")
    velocity = counter if counter is not None else as_field(model, cond)
    x = np.asarray(x0, dtype=np.float64)
    dt = 1.0 / n_steps
    for i in range(n_steps):
        t = min(i * dt, 1.0 - dt)
        x = corrected_ode_step(velocity, x, t, dt, schedule, source)
        if not np.all(np.isfinite(x)):
            raise NumericError(f"non-finite state after corrected step {i}", index=i)
    return x


def correction_for_training(schedule: Schedule, source: ScoreSource):
    """Callable suitable for ``flow.train_rectified_flow(correction=...)``."""
    return lambda xt, t: correction_term(schedule, source, xt, t)


def dsm_loss(score_net: VelocityNet, x1, eps, times, prior: dist.IsotropicGaussian, with_grad: bool = False):
    """Noise-weighted denoising score matching on the interpolation marginal.

    With ``x0 = m0 + sqrt(v0) eps`` the conditional score of ``x_t`` given ``x1``
    is ``-eps / sigma_t`` where ``sigma_t = (1 - t) sqrt(v0)``; the loss is
    ``mean ||sigma_t s(x_t, t) + eps||^2``.
    """
    times = np.asarray(times, dtype=np.float64).reshape(-1)
    x0 = prior.mean + np.sqrt(prior.variance) * eps
    xt = interpolate(x0, x1, times)
    sig = ((1.0 - times) * np.sqrt(prior.variance))[:, None]
    s, rec = score_net.forward_record(xt, times)
    r = sig * s + eps
    n = r.shape[0]
    loss = float(np.sum(r * r) / n)
    if not with_grad:
        return loss
    g = backward(score_net, rec, 2.0 * sig * r / n)
    return loss, g.params


def train_score_dsm(
    score_net: VelocityNet,
    prior: dist.IsotropicGaussian,
    target: dist.DistributionSpec,
    cfg: TrainConfig,
) -> TrainResult:
    """Fit ``score_net(x, t)`` to the score of the interpolation marginal, in place."""
    if score_net.config.dim != prior.dim or score_net.config.cond_dim:
        raise ConfigError("score network must map R^d x [0,1] to R^d without condition")
    gen = RngState(cfg.seed).child("tweedie", "dsm").generator()
    state = AdamState.for_params(score_net.params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    guard = _DivergenceGuard()
    losses: list[float] = []
    for step in range(cfg.steps):
        x1 = dist.sample(target, cfg.batch_size, gen)
        eps = gen.standard_normal(x1.shape)
        t = gen.uniform(0.0, 1.0, size=cfg.batch_size)
        loss, grads = dsm_loss(score_net, x1, eps, t, prior, with_grad=True)
        guard.check(loss, step)
        opt_step(score_net.params, grads.arrays, state)
        losses.append(loss)
    return TrainResult(score_net, losses)
