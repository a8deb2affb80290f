from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tweedieflow import distributions as dist
from tweedieflow.errors import CapabilityError, ConfigError, NumericError
from tweedieflow.rng import RngState


def test_rng_same_seed_same_stream():
    a = RngState(5).child("x", "y").generator().standard_normal(4)
    b = RngState(5).child("x", "y").generator().standard_normal(4)
    c = RngState(5).child("x", "z").generator().standard_normal(4)
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_point_mass_copies():
    out = dist.sample(dist.PointMass([2.0, 2.0]), 3, 0)
    assert np.array_equal(out, np.full((3, 2), 2.0))


def test_standard_normal_moments():
    x = dist.sample(dist.IsotropicGaussian.standard(2), 100_000, 1)
    assert np.all(np.abs(x.mean(axis=0)) < 0.02)
    assert np.all(np.abs(x.var(axis=0) - 1.0) < 0.02)


def test_mixture_half_plane_balance():
    mix = dist.GaussianMixture([0.5, 0.5], [[3.0, 0.0], [-3.0, 0.0]], 1.0)
    x = dist.sample(mix, 100_000, 2)
    assert abs(np.mean(x[:, 0] > 0) - 0.5) < 0.01


@pytest.mark.parametrize(
    "build",
    [
        lambda: dist.Ring(0.0),
        lambda: dist.IsotropicGaussian([0.0], 0.0),
        lambda: dist.GaussianMixture([0.7, 0.7], [[0.0], [1.0]], 1.0),
        lambda: dist.Checkerboard(1.0, 1),
    ],
)
def test_degenerate_specs_rejected(build):
    with pytest.raises(ConfigError):
        build()


def test_ring_and_checkerboard_support():
    r = dist.sample(dist.Ring(2.0, 0.05), 2000, 3)
    assert abs(np.linalg.norm(r, axis=1).mean() - 2.0) < 0.01
    c = dist.sample(dist.Checkerboard(1.0, 4), 2000, 3)
    cell = np.floor(c + 2.0).astype(int)
    assert np.all(cell.sum(axis=1) % 2 == 0)


def test_log_density_standard_normal_origin():
    assert dist.log_density(dist.IsotropicGaussian.standard(1), 0.0) == pytest.approx(-0.9189385, abs=1e-7)


def test_duplicate_mixture_matches_single_component():
    g = dist.IsotropicGaussian([1.0, -1.0], 2.0)
    mix = dist.GaussianMixture([0.5, 0.5], [[1.0, -1.0], [1.0, -1.0]], 2.0)
    x = np.random.default_rng(0).standard_normal((10, 2))
    assert np.allclose(dist.log_density(mix, x), dist.log_density(g, x), atol=1e-12)


def test_log_density_far_point_finite():
    mix = dist.GaussianMixture([0.5, 0.5], [[0.0, 0.0], [1.0, 1.0]], 0.01)
    val = dist.log_density(mix, [100.0, 100.0])
    assert np.isfinite(val)


def test_log_density_unsupported():
    with pytest.raises(CapabilityError):
        dist.log_density(dist.Checkerboard(), [0.0, 0.0])


def test_ring_density_normalises():
    ring = dist.Ring(1.0, 0.2)
    g = np.linspace(-2, 2, 400)  # even count keeps the origin off the grid
    xx, yy = np.meshgrid(g, g)
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    mass = np.exp(dist.log_density(ring, pts)).sum() * (g[1] - g[0]) ** 2
    assert mass == pytest.approx(1.0, abs=5e-3)


def test_single_gaussian_interp_score_closed_form():
    prior = dist.IsotropicGaussian.standard(2)
    m = np.array([2.0, -1.0])
    target = dist.IsotropicGaussian(m, 1.0)
    x, t = np.array([0.3, 0.7]), 0.4
    expected = -(x - t * m) / ((1 - t) ** 2 + t**2)
    assert np.allclose(dist.marginal_interp_score(prior, target, x, t), expected, atol=1e-12)


def test_interp_score_at_zero_is_prior_score():
    prior = dist.IsotropicGaussian([0.0, 0.0], 2.5)
    target = dist.GaussianMixture([0.3, 0.7], [[4.0, 0.0], [-1.0, 3.0]], [[0.2, 0.5], [1.0, 0.1]])
    x = np.array([[1.0, -2.0], [0.5, 0.5]])
    assert np.allclose(dist.marginal_interp_score(prior, target, x, 0.0), -x / 2.5, atol=1e-12)


def test_point_mass_singular_at_one():
    prior = dist.IsotropicGaussian.standard(1)
    with pytest.raises(NumericError):
        dist.marginal_interp_score(prior, dist.PointMass([1.0]), [0.0], 1.0)


def _fd_grad(spec, x, h=1e-5):
    g = np.zeros_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (dist.log_density(spec, x + e) - dist.log_density(spec, x - e)) / (2 * h)
    return g


def test_score_density_consistency_100_points():
    prior = dist.IsotropicGaussian.standard(2)
    target = dist.GaussianMixture([0.4, 0.6], [[2.0, 0.0], [-2.0, 1.0]], [[0.3, 0.5], [0.4, 0.2]])
    gen = np.random.default_rng(11)
    for _ in range(100):
        x = gen.uniform(-3, 3, size=2)
        t = gen.uniform(0, 0.99)
        analytic = dist.marginal_interp_score(prior, target, x, t)
        induced = dist.interp_marginal(prior, target, t)
        assert np.allclose(analytic, _fd_grad(induced, x), atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(
    st.floats(-3, 3), st.floats(-3, 3), st.floats(0.0, 0.98),
    st.floats(0.1, 3.0), st.floats(0.05, 2.0),
)
def test_score_matches_numeric_gradient_property(x0, x1, t, v0, vk):
    prior = dist.IsotropicGaussian([0.0, 0.0], v0)
    target = dist.GaussianMixture([0.5, 0.5], [[1.5, 0.0], [-1.0, -1.0]], vk)
    x = np.array([x0, x1])
    analytic = dist.marginal_interp_score(prior, target, x, t)
    assert np.allclose(analytic, _fd_grad(dist.interp_marginal(prior, target, t), x), atol=1e-6)


def test_mixture_score_matches_density_gradient():
    mix = dist.GaussianMixture([0.2, 0.8], [[0.0], [2.0]], [0.5, 1.5])
    for x in np.linspace(-2, 4, 7):
        assert dist.score(mix, [x])[0] == pytest.approx(_fd_grad(mix, np.array([x]))[0], abs=1e-6)


@pytest.mark.parametrize("mean,var", [([0.0], 1.0), ([1.0, -2.0, 0.5], 0.3)])
def test_sampler_density_consistency(mean, var):
    g = dist.IsotropicGaussian(mean, var)
    x = dist.sample(g, 100_000, 4)
    lp = dist.log_density(g, x)
    se = lp.std() / np.sqrt(lp.size)
    assert abs(lp.mean() + dist.gaussian_entropy(g)) < 3 * se
