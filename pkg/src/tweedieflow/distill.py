"""Few-step students distilled from a trained flow, with exact NFE accounting."""

from __future__ import annotations

import csv
import json
import struct
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import distributions as dist
from .errors import ConfigError
from .flow import EvalCounter, PairBatch, _DivergenceGuard, as_field, euler_sample, interpolate, regression_loss
from .nn import NetConfig, VelocityNet
from .optim import AdamState, opt_step, scheduled_lr
from .rng import RngState
from .tweedie import ScoreSource, Schedule, corrected_euler_sample, correction_term

PAIR_MAGIC = b"TWFP"


@dataclass
class StudentNet:
    net: VelocityNet
    tweedie: bool = False
    schedule: Schedule | None = None
    source: ScoreSource | None = None

    def __post_init__(self):
        if self.tweedie and (self.schedule is None or self.source is None):
            raise ConfigError("a Tweedie student needs a schedule and a score source")


@dataclass
class DistillConfig:
    steps: int = 4000
    batch_size: int = 256
    lr: float = 1e-3
    seed: int = 0
    n_pairs: int = 16384
    teacher_steps: int = 50
    # fraction of each batch regressed at t = 0 (the one-step map); the rest at
    # the Euler grid times of the step counts in ``ks`` (uniform t when ks is empty)
    one_step_fraction: float = 0.25
    ks: tuple[int, ...] = (1, 2, 4)
    # None: initialise from a copy of the teacher; otherwise a fresh net with these widths
    student_hidden: tuple[int, ...] | None = None
    lr_decay: str = "cosine"
    tweedie: bool = False
    cache_dir: str | None = None

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.n_pairs < 1 or self.teacher_steps < 1:
            raise ConfigError(f"invalid distillation config {self}")
        if not 0.0 <= self.one_step_fraction <= 1.0:
            raise ConfigError("one_step_fraction must lie in [0, 1]")


@dataclass
class NfeReport:
    sampler: str
    steps: int
    samples: int
    evaluations: int
    seconds: float

    @property
    def samples_per_second(self) -> float:
        return self.samples / self.seconds if self.seconds > 0 else float("inf")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["samples_per_second"] = self.samples_per_second
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def write_nfe_csv(path: str | Path, reports: list[NfeReport]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["sampler", "steps", "samples", "evaluations", "seconds", "samples_per_second"])
        w.writeheader()
        for r in reports:
            w.writerow(r.to_dict())


def distill_loss(student, batch: PairBatch, with_grad: bool = False):
    """``mean ||x1 - T(x0)||^2`` for the one-step map ``T``."""
    net = student.net if isinstance(student, StudentNet) else student
    zeros = np.zeros(len(batch))
    goal = batch.x1 - batch.x0
    if isinstance(student, StudentNet) and student.tweedie:
        goal = goal - correction_term(student.schedule, student.source, batch.x0, zeros)
    loss, g = regression_loss(net, batch.x0, zeros, batch.cond, goal, with_grad=with_grad)
    return (loss, g) if with_grad else loss


def one_step_map(student: StudentNet, x0) -> np.ndarray:
    samples, _ = k_step_sample(student, x0, 1)
    return samples


def k_step_sample(model, x0, k: int, cond=None, name: str | None = None) -> tuple[np.ndarray, NfeReport]:
    """Uniform k-step Euler over a student (or any velocity net), timed and counted."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    student = model if isinstance(model, StudentNet) else StudentNet(model)
    counter = EvalCounter(as_field(student.net, cond))
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    t0 = time.perf_counter()
    if student.tweedie:
        out = corrected_euler_sample(student.net, x0, k, student.schedule, student.source, counter=counter)
    else:
        out = euler_sample(student.net, x0, k, counter=counter)
    seconds = time.perf_counter() - t0
    label = name or f"{'corrected-' if student.tweedie else ''}euler-{k}"
    return out, NfeReport(label, k, x0.shape[0], counter.evaluations, seconds)


def _cache_path(cache_dir: str | Path, checksum: str, cfg: DistillConfig) -> Path:
    tag = f"{checksum[:16]}_s{cfg.seed}_n{cfg.n_pairs}_k{cfg.teacher_steps}_tw{int(cfg.tweedie)}"
    return Path(cache_dir) / f"pairs_{tag}.bin"


def write_pair_cache(path: str | Path, checksum: str, seed: int, pairs: PairBatch) -> None:
    header = json.dumps({"teacher_sha256": checksum, "seed": seed, "count": len(pairs), "dim": pairs.x0.shape[1]}).encode()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as f:
        f.write(PAIR_MAGIC + struct.pack("<I", len(header)) + header)
        f.write(np.ascontiguousarray(pairs.x0, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(pairs.x1, dtype="<f8").tobytes())
    tmp.replace(path)


def read_pair_cache(path: str | Path) -> tuple[dict, PairBatch]:
    raw = Path(path).read_bytes()
    if raw[:4] != PAIR_MAGIC:
        raise ConfigError(f"{path}: not a pair cache")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8 : 8 + hlen])
    body = np.frombuffer(raw[8 + hlen :], dtype="<f8").astype(np.float64)
    n, d = header["count"], header["dim"]
    if body.size != 2 * n * d:
        raise ConfigError(f"{path}: payload size mismatch")
    return header, PairBatch(body[: n * d].reshape(n, d), body[n * d :].reshape(n, d))


def teacher_pairs(
    teacher: VelocityNet,
    prior: dist.DistributionSpec,
    cfg: DistillConfig,
    schedule: Schedule | None = None,
    source: ScoreSource | None = None,
) -> PairBatch:
    """Teacher coupling ``(x0, teacher(x0))``, read from / written to the pair cache."""
    checksum = teacher.checksum()
    path = _cache_path(cfg.cache_dir, checksum, cfg) if cfg.cache_dir else None
    if path is not None and path.exists():
        header, pairs = read_pair_cache(path)
        if header["teacher_sha256"] == checksum and header["seed"] == cfg.seed:
            return pairs
    x0 = dist.sample(prior, cfg.n_pairs, RngState(cfg.seed).child("distill", "pairs"))
    if cfg.tweedie:
        x1 = corrected_euler_sample(teacher, x0, cfg.teacher_steps, schedule, source)
    else:
        x1 = euler_sample(teacher, x0, cfg.teacher_steps)
    pairs = PairBatch(x0, x1)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        write_pair_cache(path, checksum, cfg.seed, pairs)
    return pairs


def student_time_grid(ks) -> np.ndarray:
    """Union of the Euler evaluation times ``i / k`` over the requested step counts."""
    return np.unique(np.concatenate([np.arange(k) / k for k in ks])) if ks else np.zeros(0)


def distill(
    teacher: VelocityNet,
    schedule: Schedule | None,
    source: ScoreSource | None,
    cfg: DistillConfig,
    prior: dist.DistributionSpec | None = None,
    pairs: PairBatch | None = None,
) -> StudentNet:
    """Train a student initialised from the teacher on the teacher's coupling.

    Rows at ``t = 0`` fit the one-step map; the remaining rows regress the
    straight coupling at uniform times so that k-step Euler over the student
    is also meaningful.
    """
    if prior is None:
        prior = dist.IsotropicGaussian.standard(teacher.config.dim)
    if pairs is None:
        pairs = teacher_pairs(teacher, prior, cfg, schedule, source)
    if cfg.student_hidden is None:
        init = teacher.copy()
    else:
        tc = teacher.config
        scfg = NetConfig(tc.dim, tc.cond_dim, tuple(cfg.student_hidden), tc.n_freq, tc.activation)
        init = VelocityNet.init(scfg, RngState(cfg.seed).child("distill", "init"))
    student = StudentNet(init, cfg.tweedie, schedule if cfg.tweedie else None, source if cfg.tweedie else None)
    net = student.net
    gen = RngState(cfg.seed).child("distill", "train").generator()
    state = AdamState.for_params(net.params, lr=cfg.lr)
    guard = _DivergenceGuard()
    grid = student_time_grid(cfg.ks)
    for step in range(cfg.steps):
        state.lr = scheduled_lr(cfg.lr, step, cfg.steps, cfg.lr_decay)
        idx = gen.integers(0, len(pairs), size=cfg.batch_size)
        x0, x1 = pairs.x0[idx], pairs.x1[idx]
        if grid.size:
            t = grid[gen.integers(0, grid.size, size=cfg.batch_size)]
        else:
            t = gen.uniform(0.0, 1.0, size=cfg.batch_size)
        t[gen.uniform(size=cfg.batch_size) < cfg.one_step_fraction] = 0.0
        xt = interpolate(x0, x1, t)
        goal = x1 - x0
        if student.tweedie:
            goal = goal - correction_term(schedule, source, xt, t)
        loss, grads = regression_loss(net, xt, t, None, goal)
        guard.check(loss, step)
        opt_step(net.params, grads.arrays, state)
    return student
