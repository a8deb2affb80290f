"""Committed experiment protocols shared by the CLI and the acceptance tests.

Every protocol takes a seed and returns a plain dict of measured values so
runs can be logged, exported and compared without re-running.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, replace

import numpy as np

from . import adapt, phantom
from . import calibration as cal
from . import distributions as dist
from . import metrics
from .adapt import EwcState, ewc_fisher, ewc_penalty, ewc_penalty_grad
from .errors import InvariantError, TweedieFlowError
from .distill import DistillConfig, distill, k_step_sample
from .flow import PairBatch, TrainConfig, _DivergenceGuard, euler_sample, interpolate, reflow_repair, regression_loss, rf_loss, straightness, train_rectified_flow
from .nn import NetConfig, VelocityNet
from .optim import AdamState, opt_step
from .rng import RngState
from .tweedie import AnalyticScore, RectifiedLinear, correction_for_training, corrected_euler_sample

log = logging.getLogger(__name__)


def gmm_prior() -> dist.IsotropicGaussian:
    return dist.IsotropicGaussian.standard(2)


def gmm_target() -> dist.GaussianMixture:
    """The two-component benchmark: means (+-2, 0), variance 0.25."""
    return dist.GaussianMixture([0.5, 0.5], [[-2.0, 0.0], [2.0, 0.0]], 0.25)


def gmm_target_b() -> dist.GaussianMixture:
    """Second task for anchoring experiments: the benchmark rotated by 90 degrees."""
    return dist.GaussianMixture([0.5, 0.5], [[0.0, -2.0], [0.0, 2.0]], 0.25)


def _net(seed: int, hidden=(64, 64)) -> VelocityNet:
    return VelocityNet.init(NetConfig(2, hidden=hidden), RngState(seed).child("experiment", "init"))


def _draws(spec, n: int, seed: int, name: str) -> np.ndarray:
    return dist.sample(spec, n, RngState(seed).child("experiment", name))


def noise_floor_sw(seed: int, n: int = cal.EVAL_N) -> float:
    """Sliced W2 between two independent target samples of size ``n``."""
    tgt = gmm_target()
    return metrics.sliced_wasserstein(_draws(tgt, n, seed, "floor_a"), _draws(tgt, n, seed, "floor_b"), rng=seed)


def noise_floor_toy_fid(seed: int, n: int = cal.EVAL_N) -> float:
    tgt = gmm_target()
    return metrics.toy_fid(_draws(tgt, n, seed, "floor_a"), _draws(tgt, n, seed, "floor_b"))


def transport_quality(seed: int, steps: int = 5000, n: int = cal.EVAL_N) -> dict:
    prior, tgt = gmm_prior(), gmm_target()
    net = _net(seed)
    train_rectified_flow(net, prior, tgt, TrainConfig(steps=steps, seed=seed))
    xs = euler_sample(net, _draws(prior, n, seed, "x0"), 50)
    sw = metrics.sliced_wasserstein(xs, _draws(tgt, n, seed, "ref"), rng=seed)
    return {"seed": seed, "sw": sw, "floor": cal.SW_FLOOR, "ratio": sw / cal.SW_FLOOR}


def correction_benefit(seed: int, steps: int = 500, n: int = 1000, k: int = 8) -> dict:
    """Short-budget protocol: plain objective + plain sampler vs corrected objective + corrected sampler.

    Both nets start from the same initialisation and see the same batches.
    """
    prior, tgt = gmm_prior(), gmm_target()
    source, schedule = AnalyticScore(prior, tgt), RectifiedLinear()
    cfg = TrainConfig(steps=steps, seed=seed)
    plain = _net(seed)
    corrected = plain.copy()
    train_rectified_flow(plain, prior, tgt, cfg)
    train_rectified_flow(corrected, prior, tgt, cfg, correction=correction_for_training(schedule, source))
    x0 = _draws(prior, n, seed, "x0")
    ref = _draws(tgt, n, seed, "ref")
    bw = metrics.default_bandwidths(ref, ref)
    m_plain = metrics.mmd2(euler_sample(plain, x0, k), ref, bw)
    m_corr = metrics.mmd2(corrected_euler_sample(corrected, x0, k, schedule, source), ref, bw)
    return {"seed": seed, "mmd_plain": m_plain, "mmd_corrected": m_corr, "corrected_wins": m_corr < m_plain}


def step_reduction(seed: int, teacher_steps: int = 3000, distill_steps: int = 8000, n: int = 2000) -> dict:
    prior, tgt = gmm_prior(), gmm_target()
    teacher = _net(seed)
    train_rectified_flow(teacher, prior, tgt, TrainConfig(steps=teacher_steps, seed=seed))
    before = teacher.checksum()
    student = distill(teacher, None, None, DistillConfig(steps=distill_steps, seed=seed), prior=prior)
    if teacher.checksum() != before:
        raise InvariantError("distillation mutated the teacher")
    x0 = _draws(prior, n, seed, "x0")
    ref = _draws(tgt, n, seed, "ref")
    bw = metrics.default_bandwidths(ref, ref)
    x50, r50 = k_step_sample(teacher, x0, 50, name="teacher-euler-50")
    x4, r4 = k_step_sample(student, x0, 4, name="student-euler-4")
    # wall clock on repeated runs so timer resolution does not dominate
    t50 = min(k_step_sample(teacher, x0, 50)[1].seconds for _ in range(3))
    t4 = min(k_step_sample(student, x0, 4)[1].seconds for _ in range(3))
    m50, m4 = metrics.mmd2(x50, ref, bw), metrics.mmd2(x4, ref, bw)
    return {
        "seed": seed,
        "mmd_teacher50": m50,
        "mmd_student4": m4,
        "ratio": m4 / m50,
        "nfe_teacher": r50.evaluations // n,
        "nfe_student": r4.evaluations // n,
        "evaluations_teacher": r50.evaluations,
        "evaluations_student": r4.evaluations,
        "seconds_teacher": t50,
        "seconds_student": t4,
        "speedup": t50 / t4,
    }


def reflow_property(seed: int, steps: int = 2000, reflow_steps: int = 2000, n_pairs: int = 4096, n_eval: int = 1000) -> dict:
    """Straightness of each round's field on its own sampled coupling."""
    prior, tgt = gmm_prior(), gmm_target()
    net1 = _net(seed)
    train_rectified_flow(net1, prior, tgt, TrainConfig(steps=steps, seed=seed))
    pairs = reflow_repair(net1, prior, n_pairs, RngState(seed).child("experiment", "reflow_pairs"))
    net2 = net1.copy()
    train_rectified_flow(net2, prior, None, TrainConfig(steps=reflow_steps, seed=seed + 1), pairs=pairs)
    rng = RngState(seed).child("experiment", "reflow_eval")
    s1 = straightness(net1, reflow_repair(net1, prior, n_eval, rng))
    s2 = straightness(net2, reflow_repair(net2, prior, n_eval, rng))
    return {"seed": seed, "straightness_before": s1, "straightness_after": s2, "improved": s2 <= s1}


def _flow_eval_batch(spec, seed: int, n: int = 2000):
    g = RngState(seed).child("experiment", "anchor_eval").generator()
    batch = PairBatch(dist.sample(gmm_prior(), n, g), dist.sample(spec, n, g))
    return batch, g.uniform(size=n)


# anchor drift stays near 10% while the second task is still learned
EWC_LAMBDA = 300.0


def ewc_anchoring(
    seed: int,
    lam: float,
    anchor_steps: int = 2000,
    finetune_steps: int = 500,
    fisher_batches: int = 256,
    lr: float = 1e-3,
) -> dict:
    """Train on task A, fine-tune on task B with an EWC penalty, report task-A drift."""
    prior, task_a, task_b = gmm_prior(), gmm_target(), gmm_target_b()
    net = _net(seed)
    train_rectified_flow(net, prior, task_a, TrainConfig(steps=anchor_steps, seed=seed))
    eval_a, times_a = _flow_eval_batch(task_a, seed)
    loss_before = rf_loss(net, eval_a, times_a)

    g = RngState(seed).child("experiment", "fisher").generator()

    def stream():
        while True:
            b = PairBatch(dist.sample(prior, 1, g), dist.sample(task_a, 1, g))
            yield b, g.uniform(size=1)

    fisher = ewc_fisher(net, stream(), fisher_batches)
    state = EwcState.from_net(net, fisher, lam)
    gen = RngState(seed).child("experiment", "finetune").generator()
    opt = AdamState.for_params(net.params, lr=lr)
    guard = _DivergenceGuard()
    for step in range(finetune_steps):
        x0, x1 = dist.sample(prior, 256, gen), dist.sample(task_b, 256, gen)
        t = gen.uniform(size=256)
        loss, grads = regression_loss(net, interpolate(x0, x1, t), t, None, x1 - x0)
        guard.check(loss + ewc_penalty(net, state), step)
        for gi, pg in zip(grads.arrays, ewc_penalty_grad(net, state)):
            gi += pg
        opt_step(net.params, grads.arrays, opt, state.trainable())
    loss_after = rf_loss(net, eval_a, times_a)
    eval_b, times_b = _flow_eval_batch(task_b, seed)
    return {
        "seed": seed,
        "lam": lam,
        "anchor_loss_before": loss_before,
        "anchor_loss_after": loss_after,
        "drift": loss_after / loss_before - 1.0,
        "task_b_loss": rf_loss(net, eval_b, times_b),
    }


def calibrate(seeds=cal.CALIBRATION_SEEDS, n: int = cal.EVAL_N) -> dict:
    """Recompute the committed noise floors from independent same-distribution draws."""
    sw = [noise_floor_sw(s, n) for s in seeds]
    fid = [noise_floor_toy_fid(s, n) for s in seeds]
    return {"sw_floor": float(np.mean(sw)), "toy_fid_floor": float(np.percentile(fid, 95))}


# ---------------------------------------------------------------- phantom stages


@dataclass(frozen=True)
class StageProtocol:
    """Shared settings of the two-stage phantom experiments."""

    n: int = 1000
    size: int = 8
    hidden: tuple[int, ...] = (256, 256)
    stage1_steps: int = 3000
    stage2_steps: int = 1500
    batch_size: int = 64
    lr: float = 3e-3
    stage2_lr: float | None = None  # defaults to ``lr``
    t_max: int = 100
    window: int = 4
    n_finetune: int = 150
    rank: int = 64
    alpha: float | None = None  # adapter scale numerator; None uses adapt.DEFAULT_ALPHA
    loss: str = "all"
    # spatial and temporal act on reverse-step states and scale as dt^2, hence the large weights
    spatial: float = 1000.0
    consistency: float = 0.1
    temporal: float = 1000.0
    l2: float = 0.0
    ssim: float = 0.0
    tweedie: bool = True
    stage1: bool = True
    data_seed: int = 0
    severity_mix: tuple[float, ...] = (0.25, 0.25, 0.25, 0.25)
    n_eval: int = 500  # fresh phantoms scoring each ablation cell

    def dataset(self, seed: int) -> phantom.PhantomDataset:
        """Each experiment seed draws its own phantom set, offset by ``data_seed``."""
        return phantom.build_dataset(self.n, list(self.severity_mix), self.data_seed + seed, self.size)

    def stage_config(self, steps: int, seed: int, lr: float | None = None) -> adapt.StageConfig:
        return adapt.StageConfig(steps, self.batch_size, lr or self.lr, seed, self.t_max, "cosine", self.window)

    def weights(self) -> adapt.Stage2Weights:
        return adapt.Stage2Weights.combo(
            self.loss, self.spatial, self.consistency, self.temporal, l2=self.l2, ssim=self.ssim, tweedie=self.tweedie
        )



# few-shot fine-tuning scored by toy-FID on held-out phantoms
ABLATION_PROTOCOL = StageProtocol()
# longer diffusion-only fine-tuning on 800 images at unit adapter scale
CONDITIONAL_PROTOCOL = StageProtocol(stage2_steps=8000, n_finetune=800, loss="diff", alpha=64.0)


def stage_dataset(data_cfg: dict) -> phantom.PhantomDataset:
    return phantom.build_dataset(data_cfg["n"], data_cfg["severity_mix"], data_cfg["seed"], data_cfg["size"])


def hide_severity(data: adapt.StageData) -> adapt.StageData:
    """Blank the severity one-hot so the base model learns the severity-marginal texture."""
    cond = data.cond.copy()
    k = phantom.POOL**2
    cond[:, k : k + 4] = 0.0
    return adapt.StageData(data.z0, cond, data.side)


def stage1_data(ds: phantom.PhantomDataset, severity_visible: bool = False) -> adapt.StageData:
    data = adapt.StageData.from_samples(ds.split("train"))
    return data if severity_visible else hide_severity(data)


def finetune_data(ds: phantom.PhantomDataset, n: int) -> adapt.StageData:
    """The first ``n`` training samples with their severity labels visible."""
    train = ds.split("train")
    return adapt.StageData.from_samples(train[: min(n, len(train))])


def stage_ewc_state(net: VelocityNet, data: adapt.StageData, ewc_cfg: dict, seed: int) -> EwcState:
    g = RngState(seed).child("experiment", "stage_fisher").generator()

    def stream():
        while True:
            yield adapt.make_stage_batch(data, g.integers(0, len(data), size=1), g, 100)

    fisher = ewc_fisher(net, stream(), ewc_cfg["fisher_batches"])
    modes = adapt.selective_unfreeze(fisher) if ewc_cfg.get("selective", True) else None
    return EwcState.from_net(net, fisher, ewc_cfg["lam"], modes)


def train_base(ds: phantom.PhantomDataset, proto: StageProtocol, seed: int) -> VelocityNet:
    """Stage 1 on the training split with severity hidden; an untrained net when ``proto.stage1`` is off."""
    d = proto.size * proto.size
    net = VelocityNet.init(NetConfig(d, adapt.STAGE_COND_DIM, proto.hidden), RngState(seed).child("experiment", "stage_init"))
    if proto.stage1:
        weights = adapt.StageWeights(1.0, proto.l2, proto.ssim, 0.0, proto.tweedie)
        adapt.stage1_train(net, stage1_data(ds), proto.stage_config(proto.stage1_steps, seed), weights)
    return net


def train_stage2(base: VelocityNet, ds: phantom.PhantomDataset, proto: StageProtocol, seed: int) -> adapt.Stage2Result:
    adapters = adapt.AdapterSet.init(base, proto.rank, RngState(seed).child("experiment", "adapters"), proto.alpha)
    data = finetune_data(ds, proto.n_finetune)
    return adapt.stage2_train(base, adapters, data, proto.weights(), proto.stage_config(proto.stage2_steps, seed, proto.stage2_lr))


def generate_images(base: VelocityNet, adapters, masks, severities, seed: int, t_max: int = 100) -> np.ndarray:
    """Reverse-chain generations in pixel space, one per (mask, severity) row."""
    cond = np.stack([adapt.stage_condition(m, s) for m, s in zip(masks, severities)])
    side = masks[0].shape[0]
    eps = RngState(seed).child("experiment", "generate").generator().standard_normal((len(cond), side * side))
    z = adapt.reverse_chain(base, eps, cond, t_max, adapters)
    return adapt.latent_to_image(z).reshape(-1, side, side)


def conditional_generation(seed: int, proto: StageProtocol = CONDITIONAL_PROTOCOL, base: VelocityNet | None = None) -> dict:
    """Held-out masks generated at severity severe and none from the same noise."""
    ds = proto.dataset(seed)
    base = base or train_base(ds, proto, seed)
    res = train_stage2(base, ds, proto, seed)
    masks = [s.mask for s in ds.split("test")]
    severe = generate_images(base, res.adapters, masks, [phantom.Severity.SEVERE] * len(masks), seed, proto.t_max)
    none = generate_images(base, res.adapters, masks, [phantom.Severity.NONE] * len(masks), seed, proto.t_max)
    ious = [phantom.iou(img > phantom.THRESHOLD, m) for img, m in zip(severe, masks)]
    v_sev = float(np.mean([phantom.intra_organ_variance(img, m) for img, m in zip(severe, masks)]))
    v_none = float(np.mean([phantom.intra_organ_variance(img, m) for img, m in zip(none, masks)]))
    iou_mean = float(np.mean(ious))
    gap = v_sev - v_none
    return {
        "seed": seed,
        "iou_mean": iou_mean,
        "var_severe": v_sev,
        "var_none": v_none,
        "gap": gap,
        "margin": cal.VARIANCE_MARGIN,
        "passed": iou_mean >= 0.8 and gap >= cal.VARIANCE_MARGIN,
    }


def image_distances(generated: np.ndarray, real: np.ndarray, seed: int) -> dict:
    x = generated.reshape(len(generated), -1)
    y = real.reshape(len(real), -1)
    return {"toy_fid": metrics.toy_fid(x, y, feature_seed=seed), "mmd": metrics.mmd2(x, y)}


def eval_phantoms(proto: StageProtocol, seed: int) -> list[phantom.PhantomSample]:
    """Held-out phantoms drawn outside every dataset split, for scoring generations."""
    g = RngState(proto.data_seed + seed).child("experiment", "eval_phantoms").generator()
    sevs = g.choice(4, size=proto.n_eval, p=np.asarray(proto.severity_mix) / np.sum(proto.severity_mix))
    seeds = g.integers(0, 2**62, size=proto.n_eval)
    return [phantom.gen_phantom(int(k), int(v), proto.size) for k, v in zip(seeds, sevs)]


def ablation_cell(seed: int, proto: StageProtocol, base: VelocityNet | None = None) -> dict:
    """Train one grid cell; generate for held-out (mask, severity) pairs and compare with their images."""
    ds = proto.dataset(seed)
    base = base or train_base(ds, proto, seed)
    res = train_stage2(base, ds, proto, seed)
    held = eval_phantoms(proto, seed)
    gen = generate_images(base, res.adapters, [s.mask for s in held], [s.severity for s in held], seed, proto.t_max)
    real = np.stack([s.image for s in held])
    return {"seed": seed, **image_distances(gen, real, seed)}


def _base_key(proto: StageProtocol) -> StageProtocol:
    # fields the base network depends on
    return StageProtocol(
        n=proto.n, size=proto.size, data_seed=proto.data_seed, severity_mix=proto.severity_mix, hidden=proto.hidden, stage1_steps=proto.stage1_steps, batch_size=proto.batch_size,
        lr=proto.lr, t_max=proto.t_max, window=proto.window, l2=proto.l2, ssim=proto.ssim, tweedie=proto.tweedie, stage1=proto.stage1,
    )


def ablation_table(protos: list[StageProtocol], seeds, bases: dict | None = None) -> list[dict]:
    """Run every (cell, seed); a failing cell is recorded and the grid continues."""
    bases = {} if bases is None else bases
    rows = []
    for proto in protos:
        for seed in seeds:
            row = {"stage1": proto.stage1, "tweedie": proto.tweedie, "loss": proto.loss, "rank": proto.rank}
            try:
                key = (_base_key(proto), seed)
                if key not in bases:
                    ds = proto.dataset(seed)
                    bases[key] = train_base(ds, proto, seed)
                row.update(ablation_cell(seed, proto, bases[key]), failed=False, error="")
            except TweedieFlowError as exc:
                log.warning("ablation cell %s seed %d failed: %s", row, seed, exc)
                row.update(seed=seed, toy_fid=float("nan"), mmd=float("nan"), failed=True, error=str(exc))
            rows.append(row)
    return rows


def aggregate_cells(rows: list[dict]) -> list[dict]:
    """Mean and standard deviation over seeds for each grid cell."""
    keys = ("stage1", "tweedie", "loss", "rank")
    out = []
    for cell, group in itertools.groupby(sorted(rows, key=lambda r: tuple(str(r[k]) for k in keys)), key=lambda r: tuple(r[k] for k in keys)):
        group = list(group)
        ok = [r for r in group if not r["failed"]]
        agg = dict(zip(keys, cell))
        for m in ("toy_fid", "mmd"):
            vals = np.array([r[m] for r in ok])
            agg[f"{m}_mean"] = float(vals.mean()) if len(vals) else float("nan")
            agg[f"{m}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        agg["seeds"] = len(ok)
        agg["failed"] = len(group) - len(ok)
        out.append(agg)
    return out


def protocol_from_config(cfg: dict) -> StageProtocol:
    data = cfg["data"]
    w = cfg["weights"]
    return StageProtocol(
        n=data["n"], size=data["size"], data_seed=data["seed"], severity_mix=tuple(data["severity_mix"]), hidden=tuple(cfg["net"]["hidden"]), stage1_steps=cfg["stage1_steps"],
        stage2_steps=cfg["stage2_steps"], batch_size=cfg["batch_size"], lr=cfg["lr"], t_max=cfg["t_max"],
        window=cfg["window"], n_finetune=cfg["n_finetune"], spatial=w["spatial"], consistency=w["consistency"],
        temporal=w["temporal"], l2=w["l2"], ssim=w["ssim"], alpha=cfg["alpha"],
    )


def ablation_grid(cfg: dict) -> tuple[list[dict], list[dict]]:
    """Per-seed rows and aggregated cells for a resolved ``ablate`` config."""
    base = protocol_from_config(cfg)
    g = cfg["grid"]
    protos = [
        replace(base, stage1=s1, tweedie=tw, loss=loss, rank=r)
        for s1, tw, loss, r in itertools.product(g["stage1"], g["tweedie"], g["loss"], g["rank"])
    ]
    rows = ablation_table(protos, cfg["seeds"])
    return rows, aggregate_cells(rows)
