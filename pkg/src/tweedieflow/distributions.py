"""Priors and toy targets: exact samplers, log densities, scores.

The central closed form: with ``x0 ~ N(m0, v0 I)`` independent of a diagonal
Gaussian mixture target, the law of ``x_t = (1-t) x0 + t x1`` is the mixture
``sum_k w_k N((1-t) m0 + t mu_k, (1-t)^2 v0 + t^2 V_k)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.special import logsumexp

from .errors import CapabilityError, ConfigError, NumericError
from .rng import RngState, as_generator

LOG_2PI = float(np.log(2.0 * np.pi))


def _vec(a) -> np.ndarray:
    return np.atleast_1d(np.asarray(a, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class IsotropicGaussian:
    mean: np.ndarray
    variance: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "mean", _vec(self.mean))
        if not self.variance > 0:
            raise ConfigError("variance must be strictly positive")

    @classmethod
    def standard(cls, dim: int) -> IsotropicGaussian:
        return cls(np.zeros(dim), 1.0)

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray  # (k, d)
    variances: np.ndarray  # (k, d) diagonal

    def __post_init__(self):
        w = _vec(self.weights)
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        var = np.asarray(self.variances, dtype=np.float64)
        if var.ndim < 2:
            var = np.broadcast_to(var.reshape(-1, 1), mu.shape)
        var = np.array(np.broadcast_to(var, mu.shape))
        if w.size != mu.shape[0]:
            raise ConfigError("one weight per component required")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ConfigError(f"mixture weights must be a probability vector, got {w}")
        if not np.all(var > 0):
            raise ConfigError("mixture variances must be strictly positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", var)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @classmethod
    def from_gaussian(cls, g: IsotropicGaussian) -> GaussianMixture:
        return cls([1.0], g.mean[None, :], np.full((1, g.dim), g.variance))


@dataclass(frozen=True, eq=False)
class Ring:
    """2-D ring: radius ``R + sigma * n`` at a uniform angle."""

    radius: float
    sigma: float = 0.1

    def __post_init__(self):
        if not (self.radius > 0 and self.sigma > 0):
            raise ConfigError("ring needs positive radius and radial noise")

    dim = 2


@dataclass(frozen=True, eq=False)
class Checkerboard:
    """2-D checkerboard of ``extent x extent`` cells of side ``cell`` centred at 0."""

    cell: float = 1.0
    extent: int = 4

    def __post_init__(self):
        if not (self.cell > 0 and self.extent >= 2):
            raise ConfigError("checkerboard needs cell > 0 and extent >= 2")

    dim = 2


@dataclass(frozen=True, eq=False)
class PointMass:
    location: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "location", _vec(self.location))

    @property
    def dim(self) -> int:
        return self.location.size


DistributionSpec = Union[IsotropicGaussian, GaussianMixture, Ring, Checkerboard, PointMass]


@dataclass(frozen=True)
class NoiseModel:
    """``mu ~ N(0, tau2)``, ``z = mu + N(0, sigma2)``."""

    tau2: float
    sigma2: float

    def __post_init__(self):
        if not (self.tau2 > 0 and self.sigma2 > 0):
            raise ConfigError("tau2 and sigma2 must be strictly positive")

    def marginal_score(self, z):
        return -np.asarray(z, dtype=np.float64) / (self.tau2 + self.sigma2)

    def posterior_mean(self, z):
        return np.asarray(z, dtype=np.float64) * self.tau2 / (self.tau2 + self.sigma2)


def sample(spec: DistributionSpec, n: int, rng: RngState | np.random.Generator | int) -> np.ndarray:
    if n < 1:
        raise ConfigError("sample count must be >= 1")
    gen = as_generator(rng)
    if isinstance(spec, IsotropicGaussian):
        return spec.mean + np.sqrt(spec.variance) * gen.standard_normal((n, spec.dim))
    if isinstance(spec, GaussianMixture):
        k = gen.choice(spec.weights.size, size=n, p=spec.weights)
        eps = gen.standard_normal((n, spec.dim))
        return spec.means[k] + np.sqrt(spec.variances[k]) * eps
    if isinstance(spec, Ring):
        theta = gen.uniform(0.0, 2.0 * np.pi, size=n)
        r = spec.radius + spec.sigma * gen.standard_normal(n)
        return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    if isinstance(spec, Checkerboard):
        m = spec.extent
        # cells (i, j) with (i + j) even
        cells = np.array([(i, j) for i in range(m) for j in range(m) if (i + j) % 2 == 0])
        pick = cells[gen.integers(0, len(cells), size=n)]
        u = gen.uniform(0.0, 1.0, size=(n, 2))
        return (pick + u - m / 2.0) * spec.cell
    if isinstance(spec, PointMass):
        return np.tile(spec.location, (n, 1))
    raise ConfigError(f"unknown distribution spec {type(spec).__name__}")


def _mixture_component_logpdf(mix: GaussianMixture, x: np.ndarray) -> np.ndarray:
    """(n, k) array of log w_k + log N(x; mu_k, diag V_k)."""
    diff = x[:, None, :] - mix.means[None, :, :]
    quad = np.sum(diff * diff / mix.variances[None], axis=2)
    logdet = np.sum(np.log(mix.variances), axis=1)
    with np.errstate(divide="ignore"):
        logw = np.log(mix.weights)
    return logw[None, :] - 0.5 * (quad + logdet[None, :] + mix.dim * LOG_2PI)


def _as_batch(x, dim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 0 or (x.ndim == 1 and x.size == dim)
    if x.ndim <= 1:
        x = x.reshape(-1, dim)
    if x.shape[1] != dim:
        raise ConfigError(f"point has dimension {x.shape[1]}, expected {dim}")
    return x, single


def log_density(spec: DistributionSpec, x):
    """Exact log density; scalar for a single point, array for a batch."""
    if isinstance(spec, IsotropicGaussian):
        spec = GaussianMixture.from_gaussian(spec)
    if isinstance(spec, GaussianMixture):
        xb, single = _as_batch(x, spec.dim)
        out = logsumexp(_mixture_component_logpdf(spec, xb), axis=1)
    elif isinstance(spec, Ring):
        xb, single = _as_batch(x, 2)
        rho = np.linalg.norm(xb, axis=1)
        s = spec.sigma
        # radius R + s n may be negative, which reflects the point through the origin
        a = -0.5 * ((rho - spec.radius) / s) ** 2
        b = -0.5 * ((rho + spec.radius) / s) ** 2
        with np.errstate(divide="ignore"):
            out = np.logaddexp(a, b) - np.log(s) - 0.5 * LOG_2PI - np.log(2.0 * np.pi * rho)
    else:
        raise CapabilityError(f"{type(spec).__name__} has no density")
    return float(out[0]) if single else out


def mixture_score(mix: GaussianMixture, x) -> np.ndarray:
    xb, single = _as_batch(x, mix.dim)
    lp = _mixture_component_logpdf(mix, xb)
    resp = np.exp(lp - logsumexp(lp, axis=1, keepdims=True))
    comp = -(xb[:, None, :] - mix.means[None]) / mix.variances[None]
    out = np.einsum("nk,nkd->nd", resp, comp)
    return out[0] if single else out


def score(spec: DistributionSpec, x) -> np.ndarray:
    if isinstance(spec, IsotropicGaussian):
        spec = GaussianMixture.from_gaussian(spec)
    if isinstance(spec, GaussianMixture):
        return mixture_score(spec, x)
    raise CapabilityError(f"{type(spec).__name__} has no analytic score")


def interp_marginal(prior: IsotropicGaussian, target: DistributionSpec, t: float) -> GaussianMixture:
    """Law of ``(1-t) x0 + t x1`` for a Gaussian prior and a Gaussian-like target."""
    w, mu, var = _target_components(prior, target)
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise ConfigError(f"time {t} outside [0, 1]")
    var_t = (1.0 - t) ** 2 * prior.variance + t * t * var
    if not np.all(var_t > 0):
        raise NumericError(f"interpolation marginal is singular at t={t}")
    means_t = (1.0 - t) * prior.mean[None, :] + t * mu
    return GaussianMixture(w, means_t, var_t)


def _target_components(prior: IsotropicGaussian, target: DistributionSpec):
    if not isinstance(prior, IsotropicGaussian):
        raise CapabilityError("the prior must be an isotropic Gaussian")
    if isinstance(target, IsotropicGaussian):
        target = GaussianMixture.from_gaussian(target)
    if isinstance(target, PointMass):
        w, mu, var = np.ones(1), target.location[None, :], np.zeros((1, target.dim))
    elif isinstance(target, GaussianMixture):
        w, mu, var = target.weights, target.means, target.variances
    else:
        raise CapabilityError(f"no analytic interpolation marginal for {type(target).__name__}")
    if mu.shape[1] != prior.dim:
        raise ConfigError("prior and target dimensions differ")
    return w, mu, var


def marginal_interp_score(prior: IsotropicGaussian, target: DistributionSpec, x, t) -> np.ndarray:
    """Score of the interpolation marginal at ``x``; ``t`` may be a scalar or one time per row."""
    w, mu, var = _target_components(prior, target)
    xb, single = _as_batch(x, prior.dim)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (xb.shape[0],))
    if np.any((t < 0) | (t > 1)):
        raise ConfigError("times must lie in [0, 1]")
    s = (1.0 - t)[:, None, None]
    tt = t[:, None, None]
    var_t = s * s * prior.variance + tt * tt * var[None]  # (n, k, d)
    if not np.all(var_t > 0):
        raise NumericError("interpolation marginal is singular at the requested time")
    mean_t = s * prior.mean[None, None, :] + tt * mu[None]
    diff = xb[:, None, :] - mean_t
    with np.errstate(divide="ignore"):
        logw = np.log(w)
    lp = logw[None, :] - 0.5 * np.sum(diff * diff / var_t + np.log(var_t), axis=2)
    resp = np.exp(lp - logsumexp(lp, axis=1, keepdims=True))
    out = np.einsum("nk,nkd->nd", resp, -diff / var_t)
    return out[0] if single else out


def gaussian_entropy(spec: IsotropicGaussian) -> float:
    return 0.5 * spec.dim * (1.0 + LOG_2PI + np.log(spec.variance))
