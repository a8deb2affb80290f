"""Two-sample distances, SSIM, and the marginal-alignment table."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.signal import convolve2d

from .errors import ConfigError, NumericError
from .rng import RngState, as_generator

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass
class MetricReport:
    metric: str
    value: float
    n_x: int
    n_y: int
    params: dict = field(default_factory=dict)
    seed: int | None = None
    seconds: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise NumericError(f"{self.metric} is not finite")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _two_samples(X, Y, min_rows: int = 1) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.shape[0] < min_rows or Y.shape[0] < min_rows:
        raise ConfigError(f"need at least {min_rows} rows per sample")
    if X.shape[1] != Y.shape[1]:
        raise ConfigError("samples differ in dimension")
    return X, Y


def sq_dists(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    d = (X * X).sum(1)[:, None] + (Y * Y).sum(1)[None, :] - 2.0 * X @ Y.T
    return np.maximum(d, 0.0)


def median_bandwidth(X, Y, max_points: int = 500) -> float:
    X, Y = _two_samples(X, Y)
    Z = np.concatenate([X[:max_points], Y[:max_points]])
    d = sq_dists(Z, Z)[np.triu_indices(Z.shape[0], k=1)]
    med = float(np.sqrt(np.median(d))) if d.size else 1.0
    return med if med > 0 else 1.0


def default_bandwidths(X, Y) -> list[float]:
    h = median_bandwidth(X, Y)
    return [0.5 * h, h, 2.0 * h]


def mmd2(X, Y, bandwidths=None) -> float:
    """Unbiased squared MMD with a sum of RBF kernels ``exp(-d^2 / (2 h^2))``.

    Equal sample sizes use the paired U-statistic over ``i != j``, which is
    exactly zero for identical inputs; unequal sizes use all cross pairs.
    """
    X, Y = _two_samples(X, Y, min_rows=2)
    if bandwidths is None:
        bandwidths = default_bandwidths(X, Y)
    bandwidths = np.atleast_1d(np.asarray(bandwidths, dtype=np.float64))
    dxx, dyy, dxy = sq_dists(X, X), sq_dists(Y, Y), sq_dists(X, Y)
    m, n = X.shape[0], Y.shape[0]
    total = 0.0
    for h in bandwidths:
        kxx = np.exp(-dxx / (2.0 * h * h))
        kyy = np.exp(-dyy / (2.0 * h * h))
        kxy = np.exp(-dxy / (2.0 * h * h))
        total += (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
        total += (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
        if m == n:
            # paired U-statistic: the i == j cross terms are excluded as well
            total -= 2.0 * (kxy.sum() - np.trace(kxy)) / (m * (m - 1))
        else:
            total -= 2.0 * kxy.mean()
    return float(total)


def _w2_1d(a: np.ndarray, b: np.ndarray) -> float:
    if a.size == b.size:
        qa, qb = np.sort(a), np.sort(b)
    else:
        n = max(a.size, b.size)
        levels = (np.arange(n) + 0.5) / n
        qa = np.quantile(a, levels, method="inverted_cdf")
        qb = np.quantile(b, levels, method="inverted_cdf")
    return float(np.sqrt(np.mean((qa - qb) ** 2)))


def sliced_wasserstein(X, Y, n_projections: int = 256, rng=0) -> float:
    """Mean over random unit directions of the 1-D 2-Wasserstein distance."""
    X, Y = _two_samples(X, Y)
    d = X.shape[1]
    if d == 1:
        return _w2_1d(X[:, 0], Y[:, 0])
    gen = as_generator(rng if not isinstance(rng, int) else RngState(rng).child("metrics", "sw"))
    u = gen.standard_normal((n_projections, d))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    px, py = X @ u.T, Y @ u.T
    return float(np.mean([_w2_1d(px[:, j], py[:, j]) for j in range(n_projections)]))


def random_features(dim: int, feature_seed: int, n_features: int = 16) -> tuple[np.ndarray, np.ndarray]:
    gen = RngState(feature_seed).child("metrics", "toy_fid", dim).generator()
    W = gen.standard_normal((dim, n_features)) / np.sqrt(dim)
    b = gen.uniform(-0.5, 0.5, size=n_features)
    return W, b


def psd_sqrt(C: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh((C + C.T) / 2.0)
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def frechet_distance(mu1, C1, mu2, C2) -> float:
    s1 = psd_sqrt(C1)
    cross = psd_sqrt(s1 @ C2 @ s1)
    val = float(np.sum((mu1 - mu2) ** 2) + np.trace(C1) + np.trace(C2) - 2.0 * np.trace(cross))
    return max(val, 0.0)


def toy_fid(X, Y, feature_seed: int = 0, features: str = "random", n_features: int = 16) -> float:
    """Frechet distance between Gaussian fits in a fixed random-feature space.

    ``features="identity"`` skips the feature map (diagnostic use).
    """
    X, Y = _two_samples(X, Y)
    if features == "random":
        W, b = random_features(X.shape[1], feature_seed, n_features)
        fx, fy = np.maximum(X @ W + b, 0.0), np.maximum(Y @ W + b, 0.0)
    elif features == "identity":
        fx, fy = X, Y
    else:
        raise ConfigError(f"unknown feature map {features!r}")
    k = fx.shape[1]
    if fx.shape[0] <= k or fy.shape[0] <= k:
        raise ConfigError(f"need more than {k} rows per sample")
    C1, C2 = np.cov(fx, rowvar=False), np.cov(fy, rowvar=False)
    if not (np.all(np.isfinite(C1)) and np.all(np.isfinite(C2))):
        raise NumericError("covariance not computable")
    return frechet_distance(fx.mean(0), np.atleast_2d(C1), fy.mean(0), np.atleast_2d(C2))


def _box_mean(img: np.ndarray, w: int) -> np.ndarray:
    """Mean over every valid ``w x w`` window of the last two axes."""
    c = np.cumsum(np.cumsum(img, axis=-1), axis=-2)
    c = np.pad(c, [(0, 0)] * (img.ndim - 2) + [(1, 0), (1, 0)])
    s = c[..., w:, w:] - c[..., :-w, w:] - c[..., w:, :-w] + c[..., :-w, :-w]
    return s / (w * w)


def _box_mean_adjoint(g: np.ndarray, w: int) -> np.ndarray:
    """Transpose of :func:`_box_mean` applied to window-space gradients."""
    k = np.ones((w, w)) / (w * w)
    lead = g.shape[:-2]
    flat = g.reshape((-1,) + g.shape[-2:])
    out = np.stack([convolve2d(f, k, mode="full") for f in flat])
    return out.reshape(lead + out.shape[-2:])


def _ssim_terms(a, b, window, c1, c2):
    mu_a, mu_b = _box_mean(a, window), _box_mean(b, window)
    e_aa, e_bb, e_ab = _box_mean(a * a, window), _box_mean(b * b, window), _box_mean(a * b, window)
    var_a = e_aa - mu_a**2
    var_b = e_bb - mu_b**2
    cov = e_ab - mu_a * mu_b
    A1 = 2.0 * mu_a * mu_b + c1
    A2 = 2.0 * cov + c2
    B1 = mu_a**2 + mu_b**2 + c1
    B2 = var_a + var_b + c2
    return mu_a, mu_b, A1, A2, B1, B2


def _check_images(a, b, window):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim < 2:
        raise ConfigError(f"image shapes differ or are not 2-D: {a.shape} vs {b.shape}")
    if window > min(a.shape[-2:]) or window < 1:
        raise ConfigError(f"window {window} does not fit image {a.shape[-2:]}")
    return a, b


def ssim(a, b, window: int = 8, c1: float = SSIM_C1, c2: float = SSIM_C2):
    """Mean local SSIM with a uniform window; one value per leading index."""
    a, b = _check_images(a, b, window)
    _, _, A1, A2, B1, B2 = _ssim_terms(a, b, window, c1, c2)
    val = (A1 * A2 / (B1 * B2)).mean(axis=(-2, -1))
    return float(val) if np.ndim(val) == 0 else val


def ssim_grad(a, b, window: int = 8, c1: float = SSIM_C1, c2: float = SSIM_C2) -> tuple[np.ndarray, np.ndarray]:
    """SSIM values and their gradient with respect to ``a``."""
    a, b = _check_images(a, b, window)
    mu_a, mu_b, A1, A2, B1, B2 = _ssim_terms(a, b, window, c1, c2)
    S = A1 * A2 / (B1 * B2)
    nwin = S.shape[-2] * S.shape[-1]
    # partials of S with respect to the window statistics mu_a, E[a^2], E[ab]
    d_mu = S * (2.0 * mu_b / A1 - 2.0 * mu_b / A2 - 2.0 * mu_a / B1 + 2.0 * mu_a / B2) / nwin
    d_aa = S * (-1.0 / B2) / nwin
    d_ab = S * (2.0 / A2) / nwin
    grad = _box_mean_adjoint(d_mu, window) + 2.0 * a * _box_mean_adjoint(d_aa, window) + b * _box_mean_adjoint(d_ab, window)
    return S.mean(axis=(-2, -1)), grad


def metric_report(name: str, X, Y, seed: int | None = None, **params) -> MetricReport:
    t0 = time.perf_counter()
    if name == "mmd2":
        bw = params.get("bandwidths") or default_bandwidths(X, Y)
        value = mmd2(X, Y, bw)
        params = {"bandwidths": [float(h) for h in bw]}
    elif name == "sliced_wasserstein":
        n_proj = int(params.get("n_projections", 256))
        value = sliced_wasserstein(X, Y, n_proj, rng=seed or 0)
        params = {"n_projections": n_proj}
    elif name == "toy_fid":
        fs = int(params.get("feature_seed", 0))
        value = toy_fid(X, Y, feature_seed=fs)
        params = {"feature_seed": fs, "n_features": 16}
    else:
        raise ConfigError(f"unknown metric {name!r}")
    return MetricReport(name, value, len(X), len(Y), params, seed, time.perf_counter() - t0)


def alignment_export(samplers: dict[str, np.ndarray], target: np.ndarray, bins: int = 40) -> list[dict]:
    """Per-coordinate histograms of each sampler next to the target, plus MMD.

    Returns rows ``{sampler, coord, bin_center, density, target_density, mmd2}``;
    each (sampler, coord) contributes exactly ``bins`` rows.
    """
    if not samplers:
        raise ConfigError("at least one sampler is required")
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    rows = []
    for name, xs in samplers.items():
        xs, _ = _two_samples(xs, target, min_rows=2)
        mmd = mmd2(xs, target)
        for j in range(target.shape[1]):
            lo = min(xs[:, j].min(), target[:, j].min())
            hi = max(xs[:, j].max(), target[:, j].max())
            edges = np.linspace(lo, hi, bins + 1)
            h, _ = np.histogram(xs[:, j], edges, density=True)
            ht, _ = np.histogram(target[:, j], edges, density=True)
            centers = 0.5 * (edges[1:] + edges[:-1])
            for c, p, q in zip(centers, h, ht):
                rows.append({"sampler": name, "coord": j, "bin_center": float(c), "density": float(p), "target_density": float(q), "mmd2": mmd})
    return rows
