from __future__ import annotations

import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tweedieflow import calibration as cal
from tweedieflow import metrics
from tweedieflow.errors import ConfigError
from tweedieflow.experiments import gmm_target


def brute_mmd2(X, Y, h):
    k = lambda a, b: np.exp(-np.sum((a - b) ** 2) / (2 * h * h))
    m, n = len(X), len(Y)
    xx = sum(k(X[i], X[j]) for i in range(m) for j in range(m) if i != j) / (m * (m - 1))
    yy = sum(k(Y[i], Y[j]) for i in range(n) for j in range(n) if i != j) / (n * (n - 1))
    if m == n:
        xy = sum(k(X[i], Y[j]) for i in range(m) for j in range(n) if i != j) / (m * (m - 1))
    else:
        xy = sum(k(X[i], Y[j]) for i in range(m) for j in range(n)) / (m * n)
    return xx + yy - 2 * xy


def test_mmd_three_points_brute_force():
    X = np.array([[0.0, 0.0], [1.0, 0.5], [-0.3, 2.0]])
    Y = np.array([[0.2, -1.0], [1.5, 1.5], [0.0, 0.7]])
    assert abs(metrics.mmd2(X, Y, [1.0]) - brute_mmd2(X, Y, 1.0)) <= 1e-12


def test_mmd_unequal_sizes_brute_force():
    X = np.array([[0.0], [1.0], [2.5]])
    Y = np.array([[0.5], [-1.0]])
    assert abs(metrics.mmd2(X, Y, [0.7]) - brute_mmd2(X, Y, 0.7)) <= 1e-12


def test_mmd_identical_inputs():
    X = np.random.default_rng(0).standard_normal((50, 3))
    assert abs(metrics.mmd2(X, X.copy())) <= 1e-12


def test_mmd_separates_shifted_gaussians():
    g = np.random.default_rng(1)
    assert metrics.mmd2(g.standard_normal((1000, 1)), 5 + g.standard_normal((1000, 1))) > 0.5


def test_mmd_errors():
    with pytest.raises(ConfigError):
        metrics.mmd2(np.zeros((0, 2)), np.zeros((3, 2)))
    with pytest.raises(ConfigError):
        metrics.mmd2(np.zeros((3, 2)), np.zeros((3, 3)))


def test_sliced_w_identity():
    X = np.random.default_rng(2).standard_normal((100, 2))
    assert metrics.sliced_wasserstein(X, X) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6).flatmap(lambda n: st.tuples(
    arrays(np.int64, n, elements=st.integers(-20, 20)), arrays(np.int64, n, elements=st.integers(-20, 20)))))
def test_sliced_w_1d_matches_assignment_oracle(ab):
    a, b = (v.astype(np.float64) for v in ab)
    best = min(np.mean((a - b[list(p)]) ** 2) for p in itertools.permutations(range(a.size)))
    assert metrics.sliced_wasserstein(a[:, None], b[:, None]) == np.sqrt(best)


def test_sliced_w_translation():
    # W2 along direction u is |<u, c>|; its mean over the circle is 2|c| / pi
    X = np.random.default_rng(3).standard_normal((500, 2))
    c = np.array([3.0, -4.0])
    got = metrics.sliced_wasserstein(X, X + c, n_projections=256, rng=0)
    assert abs(got - 2 * 5.0 / np.pi) <= 0.05 * (2 * 5.0 / np.pi)


def test_toy_fid_identical():
    X = np.random.default_rng(4).standard_normal((200, 5))
    assert abs(metrics.toy_fid(X, X)) <= 1e-8


def test_toy_fid_same_distribution_two_draws():
    tgt = gmm_target()
    from tweedieflow.distributions import sample

    assert metrics.toy_fid(sample(tgt, 5000, 1), sample(tgt, 5000, 2)) <= 0.05


def test_toy_fid_identity_diagnostic():
    g = np.random.default_rng(5)
    Z = g.standard_normal((400, 16))
    Z -= Z.mean(0)
    # whiten so the sample covariance is exactly I
    L = np.linalg.cholesky(np.cov(Z, rowvar=False))
    X = Z @ np.linalg.inv(L).T
    assert metrics.toy_fid(X, 2 * X, features="identity") == pytest.approx(16.0, abs=1e-9)


def test_toy_fid_requires_rows():
    with pytest.raises(ConfigError):
        metrics.toy_fid(np.zeros((10, 2)), np.zeros((10, 2)))


def test_toy_fid_same_distribution_below_floor():
    from tweedieflow.experiments import noise_floor_toy_fid

    assert noise_floor_toy_fid(0) <= cal.TOY_FID_FLOOR


def test_ssim_properties():
    g = np.random.default_rng(6)
    a, b = g.uniform(size=(16, 16)), g.uniform(size=(16, 16))
    assert metrics.ssim(a, a) == 1.0
    assert metrics.ssim(a, b) == metrics.ssim(b, a)
    assert metrics.ssim(np.zeros((8, 8)), np.ones((8, 8))) < 0.01
    with pytest.raises(ConfigError):
        metrics.ssim(a, b[:8])
    with pytest.raises(ConfigError):
        metrics.ssim(a[:4, :4], b[:4, :4], window=8)


def test_ssim_grad_finite_difference():
    g = np.random.default_rng(7)
    a, b = g.uniform(size=(6, 6)), g.uniform(size=(6, 6))
    _, grad = metrics.ssim_grad(a, b, window=3)
    h = 1e-6
    for i, j in [(0, 0), (2, 3), (5, 5)]:
        e = np.zeros_like(a)
        e[i, j] = h
        fd = (metrics.ssim(a + e, b, 3) - metrics.ssim(a - e, b, 3)) / (2 * h)
        assert abs(fd - grad[i, j]) < 1e-7


def test_metric_report_json():
    X = np.random.default_rng(8).standard_normal((40, 2))
    rep = metrics.metric_report("mmd2", X, X + 0.1, seed=0)
    d = json.loads(rep.to_json())
    assert d["metric"] == "mmd2" and d["n_x"] == 40 and len(d["params"]["bandwidths"]) == 3
    with pytest.raises(ConfigError):
        metrics.metric_report("fid", X, X)


def test_alignment_export_rows():
    from tweedieflow.distributions import sample

    tgt = sample(gmm_target(), 400, 0)
    rows = metrics.alignment_export({"exact": sample(gmm_target(), 400, 1), "shifted": tgt + 3}, tgt, bins=10)
    assert len(rows) == 2 * 2 * 10
    exact = [r["mmd2"] for r in rows if r["sampler"] == "exact"][0]
    shifted = [r["mmd2"] for r in rows if r["sampler"] == "shifted"][0]
    assert abs(exact) < 0.01 < shifted
    with pytest.raises(ConfigError):
        metrics.alignment_export({}, tgt)
