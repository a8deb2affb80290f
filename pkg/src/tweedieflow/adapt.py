"""Two-stage conditional training: EWC-gated pretraining and low-rank fine-tuning.

Stage convention: data at ``t = 0`` and noise at ``t = 1``,
``Z_t = (1 - t) Z0 + t eps``. This is the flow convention with ``t -> 1 - t``.
The network predicts the noise-minus-data direction ``eps - Z0``; one reverse
step is ``Z_{t - dT} = Z_t - dT * net(Z_t, t)``, so the reverse drift is the
negated network output.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import phantom
from .checkpoint import read_container, write_container
from .errors import ConfigError, InvariantError, NumericError, StateError
from .flow import PairBatch, _DivergenceGuard, rf_loss
from .metrics import ssim_grad
from .nn import GradientBuffer, ParameterSet, VelocityNet, backward
from .optim import AdamState, opt_step, scheduled_lr
from .rng import RngState, as_generator
from .tweedie import tweedie_posterior_mean

log = logging.getLogger(__name__)

ORGAN_TAGS = ("liver",)
STAGE_COND_DIM = phantom.COND_DIM + len(ORGAN_TAGS)
# adapter scale numerator, held fixed across ranks so the update scale is alpha / r
DEFAULT_ALPHA = 8.0
LAYER_MODES = ("free", "anchored", "frozen")


# ---------------------------------------------------------------- data


@dataclass
class StageBatch:
    z0: np.ndarray  # (n, d) flattened images
    zs: np.ndarray  # (n, 64) pooled mask features
    zp: np.ndarray  # (n, 4 + n_tags) severity one-hot and organ tag
    eps: np.ndarray  # (n, d)
    t: np.ndarray  # (n,) on the grid i / T_max, i = 1..T_max
    dt: float

    def __post_init__(self):
        self.z0 = np.atleast_2d(np.asarray(self.z0, dtype=np.float64))
        self.eps = np.atleast_2d(np.asarray(self.eps, dtype=np.float64))
        self.zs = np.atleast_2d(np.asarray(self.zs, dtype=np.float64))
        self.zp = np.atleast_2d(np.asarray(self.zp, dtype=np.float64))
        self.t = np.asarray(self.t, dtype=np.float64).reshape(-1)
        n = self.z0.shape[0]
        if self.eps.shape != self.z0.shape:
            raise ConfigError(f"noise shape {self.eps.shape} differs from data {self.z0.shape}")
        if self.zs.shape[0] != n or self.zp.shape[0] != n or self.t.shape != (n,):
            raise ConfigError("batch fields disagree on the row count")
        if not (np.all(np.isfinite(self.zs)) and np.all(np.isfinite(self.zp))):
            raise ConfigError("conditions must be finite")
        if not self.dt > 0:
            raise ConfigError("step size must be positive")
        steps = self.t / self.dt
        if np.any(np.abs(steps - np.round(steps)) > 1e-9) or np.any(self.t <= 0) or np.any(self.t > 1 + 1e-12):
            raise ConfigError("batch times must lie on the stage grid")

    def __len__(self) -> int:
        return self.z0.shape[0]

    @property
    def cond(self) -> np.ndarray:
        return np.concatenate([self.zs, self.zp], axis=1)

    @property
    def zt(self) -> np.ndarray:
        return stage1_forward_noise(self.z0, self.t, self.eps)


def prompt_vector(severity: int, organ: str = "liver") -> np.ndarray:
    """Severity one-hot followed by the organ-tag one-hot."""
    if organ not in ORGAN_TAGS:
        raise ConfigError(f"unknown organ tag {organ!r}")
    v = np.zeros(4 + len(ORGAN_TAGS))
    v[int(severity)] = 1.0
    v[4 + ORGAN_TAGS.index(organ)] = 1.0
    return v


def stage_condition(mask: np.ndarray, severity: int) -> np.ndarray:
    """``Zs ⊕ Zp`` for one sample: pooled mask, severity one-hot, organ tag."""
    return np.concatenate([phantom.condition_vector(mask, 0)[: phantom.POOL**2], prompt_vector(severity)])


def image_to_latent(img) -> np.ndarray:
    """Affine pixel map sending background to -1 and organ intensity to +1."""
    return 2.0 * (np.asarray(img, dtype=np.float64) - phantom.BACKGROUND) / (phantom.ORGAN - phantom.BACKGROUND) - 1.0


def latent_to_image(z) -> np.ndarray:
    return phantom.BACKGROUND + (np.asarray(z, dtype=np.float64) + 1.0) * (phantom.ORGAN - phantom.BACKGROUND) / 2.0


@dataclass
class StageData:
    z0: np.ndarray  # (n, d)
    cond: np.ndarray  # (n, STAGE_COND_DIM)
    side: int

    def __len__(self) -> int:
        return self.z0.shape[0]

    @classmethod
    def from_samples(cls, samples: Sequence[phantom.PhantomSample]) -> StageData:
        if not samples:
            raise ConfigError("no samples")
        side = samples[0].image.shape[0]
        z0 = np.stack([image_to_latent(s.image.ravel()) for s in samples])
        cond = np.stack([stage_condition(s.mask, s.severity) for s in samples])
        return cls(z0, cond, side)

    def subset(self, idx) -> StageData:
        return StageData(self.z0[idx], self.cond[idx], self.side)


def make_stage_batch(data: StageData, idx, gen: np.random.Generator, t_max: int) -> StageBatch:
    idx = np.asarray(idx)
    n = idx.size
    eps = gen.standard_normal((n, data.z0.shape[1]))
    t = gen.integers(1, t_max + 1, size=n) / t_max
    k = phantom.POOL**2
    return StageBatch(data.z0[idx], data.cond[idx, :k], data.cond[idx, k:], eps, t, 1.0 / t_max)


# ---------------------------------------------------------------- stage 1


def stage1_forward_noise(z0, t, eps) -> np.ndarray:
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise ConfigError(f"shape mismatch {z0.shape} vs {eps.shape}")
    t = np.asarray(t, dtype=np.float64)
    if np.any((t < 0) | (t > 1)):
        raise ConfigError("noise level outside [0, 1]")
    if t.ndim == 1 and z0.ndim == 2:
        t = t[:, None]
    return (1.0 - t) * z0 + t * eps


def _cond(zs, zp):
    if zp is None:
        return zs
    zs, zp = np.asarray(zs, dtype=np.float64), np.asarray(zp, dtype=np.float64)
    return np.concatenate([zs, zp], axis=-1)


def stage1_reverse_step(net: VelocityNet, z_t, zs, zp, t, dt: float, adapters=None) -> np.ndarray:
    out = z_t - dt * net.forward(z_t, t, _cond(zs, zp), adapters)
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite state in reverse step")
    return out


def reverse_chain(net: VelocityNet, eps, cond, t_max: int = 100, adapters=None) -> np.ndarray:
    """Chain ``t_max`` reverse steps from pure noise at ``t = 1`` down to ``t = 0``."""
    if t_max < 1:
        raise ConfigError("t_max must be >= 1")
    z = np.atleast_2d(np.asarray(eps, dtype=np.float64))
    dt = 1.0 / t_max
    for i in range(t_max, 0, -1):
        z = stage1_reverse_step(net, z, cond, None, i * dt, dt, adapters)
    return z


def tweedie_refine(z_t, t, pred) -> np.ndarray:
    """Data estimate from ``Z_t`` and the predicted ``eps - Z0`` direction.

    The prediction implies the score ``-(Z_t + (1 - t) pred) / t`` of the
    noisy marginal; Tweedie's formula with variance ``t^2`` gives
    ``E[(1 - t) Z0 | Z_t]``, which is rescaled. Algebraically this equals
    ``Z_t - t * pred``; that form is used so ``t = 1`` stays finite.
    """
    t = np.asarray(t, dtype=np.float64)
    tt = t[:, None] if t.ndim == 1 and np.ndim(z_t) == 2 else t
    return z_t - tt * pred


def tweedie_refine_via_score(z_t, t: float, pred) -> np.ndarray:
    """Reference evaluation of :func:`tweedie_refine` through the score (``t < 1``)."""
    if not 0.0 < t < 1.0:
        raise ConfigError("score form needs 0 < t < 1")
    score = -(z_t + (1.0 - t) * pred) / t
    return tweedie_posterior_mean(z_t, t * t, score) / (1.0 - t)


def _square_side(d: int) -> int:
    side = math.isqrt(d)
    if side * side != d:
        raise ConfigError(f"state dimension {d} is not a square image")
    return side


def stage1_diff_loss(net: VelocityNet, batch: StageBatch, adapters=None, with_grad: bool = False):
    """Mean over rows of ``||net(Z_t) - (eps - Z0)||^2``."""
    pred, rec = net.forward_record(batch.zt, batch.t, batch.cond, adapters)
    r = pred - (batch.eps - batch.z0)
    n = len(batch)
    loss = float(np.sum(r * r) / n)
    if not with_grad:
        return loss
    g = backward(net, rec, 2.0 * r / n)
    return loss, (g.params if adapters is None else g.adapters)


@dataclass(frozen=True)
class StageWeights:
    diff: float = 1.0
    l2: float = 0.0
    ssim: float = 0.0
    ewc: float = 0.0
    tweedie: bool = True  # pixel terms on the refined estimate, else on the raw reverse step

    def __post_init__(self):
        if min(self.diff, self.l2, self.ssim, self.ewc) < 0:
            raise ConfigError("loss weights must be nonnegative")


@dataclass
class LossResult:
    total: float
    components: dict[str, float]
    recon: np.ndarray | None = None
    grads: GradientBuffer | None = None


def _pixel_terms(recon, z0, n, w_l2, w_ssim, window):
    """L2 and (1 - SSIM) on reconstructions, with their gradient w.r.t. ``recon``."""
    diff = recon - z0
    l2 = float(np.sum(diff * diff) / n)
    g = (2.0 * w_l2 / n) * diff
    side = _square_side(z0.shape[1]) if w_ssim else None
    if w_ssim:
        img_r = recon.reshape(n, side, side)
        img_0 = z0.reshape(n, side, side)
        vals, dval = ssim_grad(img_r, img_0, window)
        ssim_term = float(1.0 - np.mean(vals))
        g = g - (w_ssim / n) * dval.reshape(n, -1)
    else:
        ssim_term = 0.0
    return l2, ssim_term, g


def composite_stage1_loss(
    net: VelocityNet,
    batch: StageBatch,
    weights: StageWeights = StageWeights(),
    ewc: EwcState | None = None,
    with_grad: bool = False,
    window: int = 8,
) -> LossResult:
    """``w_diff L_diff + w_l2 L2 + w_ssim (1 - SSIM) + w_ewc EWC``.

    Pixel terms compare the Tweedie-refined estimate after one reverse step
    from ``Z_t`` with the clean image; with ``weights.tweedie`` off they
    compare the reverse-step state itself.
    """
    zt = batch.zt
    n = len(batch)
    pred, rec = net.forward_record(zt, batch.t, batch.cond)
    r = pred - (batch.eps - batch.z0)
    diff = float(np.sum(r * r) / n)
    step = zt - batch.dt * pred
    recon = tweedie_refine(step, batch.t - batch.dt, pred) if weights.tweedie else step
    use_pix = weights.l2 > 0 or weights.ssim > 0
    if use_pix:
        l2, ssim_term, g_recon = _pixel_terms(recon, batch.z0, n, weights.l2, weights.ssim, window)
    else:
        l2 = float(np.sum((recon - batch.z0) ** 2) / n)
        ssim_term, g_recon = 0.0, None
    pen = ewc_penalty(net, ewc) if ewc is not None else 0.0
    comps = {"diff": diff, "l2": l2, "ssim": ssim_term, "ewc": pen}
    total = weights.diff * diff + weights.l2 * l2 + weights.ssim * ssim_term + weights.ewc * pen
    if not np.isfinite(total):
        raise NumericError("composite loss is not finite")
    if not with_grad:
        return LossResult(total, comps, recon)
    g_out = (2.0 * weights.diff / n) * r
    if g_recon is not None:
        # recon = Z_t - t * pred (refined) or Z_t - dT * pred (raw step)
        g_out = g_out - (batch.t[:, None] if weights.tweedie else batch.dt) * g_recon
    grads = backward(net, rec, g_out).params
    if ewc is not None and weights.ewc:
        for g, pg in zip(grads.arrays, ewc_penalty_grad(net, ewc)):
            g += weights.ewc * pg
    return LossResult(total, comps, recon, grads)


# ---------------------------------------------------------------- EWC


@dataclass
class EwcState:
    anchor: list[np.ndarray]
    fisher: list[np.ndarray]
    lam: float = 1.0
    modes: list[str] = field(default_factory=list)  # one per layer

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("EWC strength must be nonnegative")
        if len(self.anchor) != len(self.fisher):
            raise ConfigError("anchor and Fisher lists differ in length")
        for a, f in zip(self.anchor, self.fisher):
            if a.shape != f.shape:
                raise ConfigError("anchor and Fisher shapes differ")
            if np.any(f < 0):
                raise ConfigError("Fisher entries must be nonnegative")
        if not self.modes:
            self.modes = ["anchored"] * (len(self.anchor) // 2)
        if any(m not in LAYER_MODES for m in self.modes):
            raise ConfigError(f"layer modes must be among {LAYER_MODES}")
        if 2 * len(self.modes) != len(self.anchor):
            raise ConfigError("one mode per layer is required")

    @classmethod
    def from_net(cls, net: VelocityNet, fisher: Sequence[np.ndarray], lam: float = 1.0, modes=None) -> EwcState:
        return cls([p.copy() for p in net.params], [np.asarray(f, dtype=np.float64).copy() for f in fisher], lam, list(modes or []))

    def penalised(self) -> list[bool]:
        """Per parameter array: whether the quadratic anchor applies."""
        return [m == "anchored" for m in self.modes for _ in range(2)]

    def trainable(self) -> list[bool]:
        return [m != "frozen" for m in self.modes for _ in range(2)]


def _loss_for_fisher(net, item):
    if isinstance(item, StageBatch):
        return stage1_diff_loss(net, item, with_grad=True)
    if isinstance(item, tuple) and len(item) == 2 and isinstance(item[0], PairBatch):
        return rf_loss(net, item[0], item[1], with_grad=True)
    raise ConfigError(f"no default anchor loss for {type(item).__name__}")


def ewc_fisher(
    params: ParameterSet,
    batch_stream: Iterable,
    n_batches: int,
    loss_fn: Callable | None = None,
) -> list[np.ndarray]:
    """Empirical Fisher diagonal: mean over batches of squared loss gradients.

    ``loss_fn(params, batch) -> (loss, GradientBuffer)``; by default stage
    batches use the diffusion loss and ``(PairBatch, times)`` the flow loss.
    """
    if n_batches < 1:
        raise ConfigError("n_batches must be >= 1")
    loss_fn = loss_fn or _loss_for_fisher
    acc = [np.zeros_like(p) for p in params.params]
    seen = 0
    for item in batch_stream:
        if seen == n_batches:
            break
        _, g = loss_fn(params, item)
        for a, gi in zip(acc, g.arrays):
            a += gi * gi
        seen += 1
    if seen < n_batches:
        raise ConfigError(f"batch stream ended after {seen} of {n_batches} batches")
    return [a / n_batches for a in acc]


def ewc_penalty(net: ParameterSet, state: EwcState) -> float:
    """``(lam / 2) * sum F (theta - theta*)^2`` over anchored layers."""
    if len(net.params) != len(state.anchor):
        raise ConfigError("parameter list does not match the EWC anchor")
    total = 0.0
    for p, a, f, on in zip(net.params, state.anchor, state.fisher, state.penalised()):
        if p.shape != a.shape:
            raise ConfigError(f"parameter shape {p.shape} does not match anchor {a.shape}")
        if on:
            d = p - a
            total += float(np.sum(f * d * d))
    return 0.5 * state.lam * total


def ewc_penalty_grad(net: ParameterSet, state: EwcState) -> list[np.ndarray]:
    return [state.lam * f * (p - a) if on else np.zeros_like(p) for p, a, f, on in zip(net.params, state.anchor, state.fisher, state.penalised())]


def layer_fisher_means(fisher: Sequence[np.ndarray]) -> np.ndarray:
    """Mean Fisher value per layer (weight and bias pooled)."""
    return np.array([np.concatenate([fisher[i].ravel(), fisher[i + 1].ravel()]).mean() for i in range(0, len(fisher), 2)])


def selective_unfreeze(fisher: Sequence[np.ndarray]) -> list[str]:
    """Layers in the lowest quartile of mean Fisher train freely; the rest are anchored."""
    means = layer_fisher_means(fisher)
    cut = np.quantile(means, 0.25)
    return ["free" if m <= cut else "anchored" for m in means]


# ---------------------------------------------------------------- training


@dataclass
class StageConfig:
    steps: int = 1000
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    t_max: int = 100
    lr_decay: str = "cosine"
    window: int = 8

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or not self.lr > 0 or self.t_max < 1:
            raise ConfigError(f"invalid stage config {self}")


@dataclass
class TrainTrace:
    rows: list[dict] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    def write_csv(self, path: str | Path) -> None:
        if not self.rows:
            Path(path).write_text("step\n")
            return
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(self.rows[0]))
            w.writeheader()
            w.writerows(self.rows)


def stage1_train(
    net: VelocityNet,
    data: StageData,
    cfg: StageConfig,
    weights: StageWeights = StageWeights(),
    ewc: EwcState | None = None,
    rng_path: tuple[str, ...] = ("adapt", "stage1"),
) -> TrainTrace:
    """Train ``net`` in place on the composite loss; frozen layers stay put."""
    gen = RngState(cfg.seed).child(*rng_path).generator()
    state = AdamState.for_params(net.params, lr=cfg.lr)
    trainable = ewc.trainable() if ewc is not None else None
    guard = _DivergenceGuard()
    trace = TrainTrace()
    for step in range(cfg.steps):
        state.lr = scheduled_lr(cfg.lr, step, cfg.steps, cfg.lr_decay)
        idx = gen.integers(0, len(data), size=cfg.batch_size)
        batch = make_stage_batch(data, idx, gen, cfg.t_max)
        res = composite_stage1_loss(net, batch, weights, ewc, with_grad=True, window=cfg.window)
        guard.check(res.total, step)
        opt_step(net.params, res.grads.arrays, state, trainable)
        trace.rows.append({"step": step, "total": res.total, **res.components})
    return trace


# ---------------------------------------------------------------- stage 2


class AdapterSet(ParameterSet):
    """Low-rank factors ``A_l`` (rows x r) and ``B_l`` (r x cols) per adapted layer."""

    def __init__(self, shapes: Sequence[tuple[int, int]], layers: Sequence[int], rank: int, alpha: float, A, B):
        if rank < 1:
            raise ConfigError("adapter rank must be >= 1")
        self.shapes = [tuple(s) for s in shapes]
        self.layers = [int(i) for i in layers]
        self.rank = int(rank)
        self.alpha = float(alpha)
        self.params = []
        for i, a, b in zip(self.layers, A, B):
            rows, cols = self.shapes[i]
            a = np.array(a, dtype=np.float64)
            b = np.array(b, dtype=np.float64)
            if a.shape != (rows, rank) or b.shape != (rank, cols):
                raise ConfigError(f"adapter factors {a.shape}, {b.shape} do not fit layer {i} of shape {(rows, cols)} at rank {rank}")
            self.params += [a, b]
        self._slot = {layer: k for k, layer in enumerate(self.layers)}

    @classmethod
    def init(cls, net: VelocityNet, rank: int, rng, alpha: float | None = None, layers=None) -> AdapterSet:
        """Gaussian ``A`` with variance ``1 / r`` and zero ``B``; ``alpha`` defaults to ``DEFAULT_ALPHA``."""
        if rank < 1:
            raise ConfigError("adapter rank must be >= 1")
        gen = as_generator(rng)
        shapes = net.config.layer_shapes
        layers = list(range(len(shapes))) if layers is None else sorted(set(layers))
        if any(not 0 <= i < len(shapes) for i in layers):
            raise ConfigError(f"adapted layer index out of range: {layers}")
        A = [gen.standard_normal((shapes[i][0], rank)) / np.sqrt(rank) for i in layers]
        B = [np.zeros((rank, shapes[i][1])) for i in layers]
        return cls(shapes, layers, rank, DEFAULT_ALPHA if alpha is None else alpha, A, B)

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @property
    def A(self) -> list[np.ndarray]:
        return self.params[0::2]

    @property
    def B(self) -> list[np.ndarray]:
        return self.params[1::2]

    def param_names(self) -> list[str]:
        return [n for i in self.layers for n in (f"layer{i}.A", f"layer{i}.B")]

    def expected_count(self) -> int:
        return sum(self.rank * (self.shapes[i][0] + self.shapes[i][1]) for i in self.layers)

    def copy(self) -> AdapterSet:
        return AdapterSet(self.shapes, self.layers, self.rank, self.alpha, self.A, self.B)

    def delta(self, layer: int) -> np.ndarray:
        k = self._slot[layer]
        return self.scale * (self.params[2 * k] @ self.params[2 * k + 1])

    def effective_weights(self, net: VelocityNet) -> list[np.ndarray]:
        if [tuple(s) for s in net.config.layer_shapes] != self.shapes:
            raise ConfigError("adapters were built for a differently shaped network")
        out = []
        for i, w in enumerate(net.weights):
            out.append(w + self.delta(i) if i in self._slot else w)
        return out

    def accumulate_layer_grad(self, layer: int, dw: np.ndarray, grads: GradientBuffer) -> None:
        k = self._slot.get(layer)
        if k is None:
            return
        a, b = self.params[2 * k], self.params[2 * k + 1]
        grads.arrays[2 * k] += self.scale * dw @ b.T
        grads.arrays[2 * k + 1] += self.scale * a.T @ dw


def lora_forward(base_net: VelocityNet, adapters: AdapterSet, x, t, cond=None) -> np.ndarray:
    return base_net.forward(x, t, cond, adapters)


def consistency_losses(base_out, adapt_out, base_step, adapt_step, layers=None) -> tuple[float, float, float]:
    """``(L_consistency, L_spatial, L_temporal)``.

    ``base_out``/``adapt_out`` are matched lists of hidden activations;
    ``base_step``/``adapt_step`` hold each network's two consecutive reverse
    states ``(Z_{t-1}, Z_{t-2})``. Every term is a mean over rows of a summed
    squared difference.
    """
    if len(base_out) != len(adapt_out):
        raise ConfigError("activation lists differ in layer count")
    idx = range(len(base_out)) if layers is None else layers
    n = np.atleast_2d(base_step[0]).shape[0]
    lc = sum(float(np.sum((adapt_out[i] - base_out[i]) ** 2)) for i in idx) / n
    ds = adapt_step[0] - base_step[0]
    ls = float(np.sum(ds * ds) / n)
    dt = (adapt_step[1] - adapt_step[0]) - (base_step[1] - base_step[0])
    lt = float(np.sum(dt * dt) / n)
    return lc, ls, lt


@dataclass(frozen=True)
class Stage2Weights:
    diff: float = 1.0
    spatial: float = 0.0
    consistency: float = 0.0
    temporal: float = 0.0
    l2: float = 0.0
    ssim: float = 0.0
    tweedie: bool = True

    def __post_init__(self):
        if min(self.diff, self.spatial, self.consistency, self.temporal, self.l2, self.ssim) < 0:
            raise ConfigError("loss weights must be nonnegative")

    @classmethod
    def combo(cls, name: str, spatial: float = 1.0, consistency: float = 1.0, temporal: float = 1.0, **pixel) -> Stage2Weights:
        """Named loss combinations of the ablation grid."""
        table = {
            "diff": (0.0, 0.0, 0.0),
            "diff+spatial": (spatial, 0.0, 0.0),
            "diff+consistency": (0.0, consistency, 0.0),
            "all": (spatial, consistency, temporal),
        }
        if name not in table:
            raise ConfigError(f"unknown loss combination {name!r}; expected one of {sorted(table)}")
        s, c, t = table[name]
        return cls(1.0, s, c, t, **pixel)


LOSS_COMBOS = ("diff", "diff+spatial", "diff+consistency", "all")


def stage2_loss(
    base_net: VelocityNet,
    adapters: AdapterSet,
    batch: StageBatch,
    weights: Stage2Weights = Stage2Weights(),
    with_grad: bool = False,
    window: int = 8,
) -> LossResult:
    """Composite Stage-2 loss; gradients are with respect to the adapters only.

    Spatial and temporal terms follow both networks for two reverse steps from
    the shared ``Z_t`` (the second step at ``t - dT``, clamped at 0).
    """
    n = len(batch)
    cond = batch.cond
    dt = batch.dt
    zt = batch.zt
    t1 = np.maximum(batch.t - dt, 0.0)
    pb, rb = base_net.forward_record(zt, batch.t, cond)
    pa, ra = base_net.forward_record(zt, batch.t, cond, adapters)
    zb1, za1 = zt - dt * pb, zt - dt * pa
    pb2 = base_net.forward(zb1, t1, cond)
    pa2, ra2 = base_net.forward_record(za1, t1, cond, adapters)
    zb2, za2 = zb1 - dt * pb2, za1 - dt * pa2

    target = batch.eps - batch.z0
    r_a = pa - target
    r_b = pb - target
    diff = float(np.sum(r_a * r_a) / n)
    diff_base = float(np.sum(r_b * r_b) / n)
    lc, ls, lt = consistency_losses(rb.hidden, ra.hidden, (zb1, zb2), (za1, za2))
    recon = tweedie_refine(za1, t1, pa) if weights.tweedie else za1
    if weights.l2 or weights.ssim:
        l2, ssim_term, g_recon = _pixel_terms(recon, batch.z0, n, weights.l2, weights.ssim, window)
    else:
        l2, ssim_term, g_recon = float(np.sum((recon - batch.z0) ** 2) / n), 0.0, None
    comps = {"diff": diff, "diff_base": diff_base, "consistency": lc, "spatial": ls, "temporal": lt, "l2": l2, "ssim": ssim_term}
    total = weights.diff * diff + weights.consistency * lc + weights.spatial * ls + weights.temporal * lt + weights.l2 * l2 + weights.ssim * ssim_term
    if not np.isfinite(total):
        raise NumericError("stage-2 loss is not finite")
    if not with_grad:
        return LossResult(total, comps, recon)

    grads = adapters.zero_grads()
    # second adapted step: L_temporal depends on pa2 through za2 - za1 = -dt * pa2
    if weights.temporal:
        g_pa2 = -dt * (2.0 * weights.temporal / n) * ((za2 - za1) - (zb2 - zb1))
        g2 = backward(base_net, ra2, g_pa2)
        grads.add_(g2.adapters)
        g_za1 = g2.x
    else:
        g_za1 = np.zeros_like(za1)
    # za1 = zt - dt * pa enters L_spatial and the second step's input
    g_za1 = g_za1 + (2.0 * weights.spatial / n) * (za1 - zb1)
    g_pa = (2.0 * weights.diff / n) * r_a - dt * g_za1
    if g_recon is not None:
        # recon = za1 - t1 * pa = zt - t * pa, or za1 = zt - dT * pa
        g_pa = g_pa - (batch.t[:, None] if weights.tweedie else dt) * g_recon
    g_hidden = [(2.0 * weights.consistency / n) * (ha - hb) for ha, hb in zip(ra.hidden, rb.hidden)] if weights.consistency else None
    g1 = backward(base_net, ra, g_pa, g_hidden)
    grads.add_(g1.adapters)
    return LossResult(total, comps, recon, grads)


@dataclass
class Stage2Result:
    adapters: AdapterSet
    trace: TrainTrace
    base_checksum: str
    freeze_ok: bool


def stage2_train(
    base_net: VelocityNet,
    adapters: AdapterSet,
    data: StageData,
    weights: Stage2Weights,
    cfg: StageConfig,
) -> Stage2Result:
    """Train ``adapters`` in place with ``base_net`` frozen.

    A change of the base parameters during the run raises ``InvariantError``.
    """
    before = base_net.checksum()
    gen = RngState(cfg.seed).child("adapt", "stage2").generator()
    state = AdamState.for_params(adapters.params, lr=cfg.lr)
    guard = _DivergenceGuard()
    trace = TrainTrace()
    for step in range(cfg.steps):
        state.lr = scheduled_lr(cfg.lr, step, cfg.steps, cfg.lr_decay)
        idx = gen.integers(0, len(data), size=cfg.batch_size)
        batch = make_stage_batch(data, idx, gen, cfg.t_max)
        res = stage2_loss(base_net, adapters, batch, weights, with_grad=True, window=cfg.window)
        guard.check(res.total, step)
        opt_step(adapters.params, res.grads.arrays, state)
        trace.rows.append({"step": step, "total": res.total, **res.components})
    after = base_net.checksum()
    if after != before:
        raise InvariantError("base network parameters changed during adapter training")
    return Stage2Result(adapters, trace, after, True)


def save_adapters(path: str | Path, adapters: AdapterSet, base: VelocityNet) -> str:
    header = {
        "kind": "adapters",
        "base_sha256": base.checksum(),
        "rank": adapters.rank,
        "alpha": adapters.alpha,
        "layers": adapters.layers,
        "shapes": [list(s) for s in adapters.shapes],
    }
    return write_container(path, header, adapters.param_names(), adapters.params)


def load_adapters(path: str | Path, base: VelocityNet) -> AdapterSet:
    header, arrays = read_container(path)
    if header.get("kind") != "adapters":
        raise ConfigError(f"{path}: not an adapter checkpoint")
    if header["base_sha256"] != base.checksum():
        raise StateError(f"{path}: adapters were trained against a different base network")
    return AdapterSet([tuple(s) for s in header["shapes"]], header["layers"], header["rank"], header["alpha"], arrays[0::2], arrays[1::2])
