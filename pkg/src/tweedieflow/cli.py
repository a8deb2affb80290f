"""Command-line entry point: ``tweedieflow <command> [--config PATH] [flags]``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure or
divergence, 4 invariant violation, 1 anything else raised by the package.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import adapt, config, experiments, metrics, phantom
from . import distributions as dist
from .checkpoint import file_sha256, load_net, save_net
from .distill import DistillConfig, distill, k_step_sample, write_nfe_csv
from .errors import ConfigError, InvariantError, TweedieFlowError
from .flow import TrainConfig, train_rectified_flow
from .nn import NetConfig, VelocityNet
from .rng import RngState
from .tweedie import AnalyticScore, correction_for_training, schedule_from_config

log = logging.getLogger("tweedieflow")

COMMANDS = ("train-flow", "sample", "distill", "stage1", "stage2", "eval", "ablate", "gen-phantoms", "report")
MANIFEST = "run.json"


# ---------------------------------------------------------------- helpers


def _write_rows(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        if not rows:
            return
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def write_samples(path: Path, x: np.ndarray) -> None:
    x = np.atleast_2d(x)
    header = ",".join(f"x{j}" for j in range(x.shape[1]))
    np.savetxt(path, x, delimiter=",", header=header, comments="", fmt="%.17g")


def read_samples(path: str | Path) -> np.ndarray:
    try:
        return np.atleast_2d(np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.float64))
    except OSError:
        raise ConfigError(f"samples file not found: {path}") from None


def _prior_for(cfg_prior, dim: int):
    if cfg_prior is None:
        return dist.IsotropicGaussian.standard(dim)
    prior = config.dist_from_config(cfg_prior)
    if not isinstance(prior, dist.IsotropicGaussian) or prior.dim != dim:
        raise ConfigError(f"prior must be an isotropic Gaussian of dimension {dim}")
    return prior


def _net_config(d: dict, dim: int, cond_dim: int = 0) -> NetConfig:
    return NetConfig(dim, cond_dim, tuple(d.get("hidden", (64, 64))), int(d.get("n_freq", 4)), d.get("activation", "silu"))


def _source(prior, cfg_target):
    if cfg_target is None:
        raise ConfigError("Tweedie correction needs an analytic target for the score")
    return AnalyticScore(prior, config.dist_from_config(cfg_target))


# ---------------------------------------------------------------- commands


def cmd_train_flow(cfg: dict, out: Path) -> dict:
    prior = config.dist_from_config(cfg["prior"])
    target = config.dist_from_config(cfg["target"])
    if not isinstance(prior, dist.IsotropicGaussian):
        raise ConfigError("the prior must be an isotropic Gaussian")
    if prior.dim != target.dim:
        raise ConfigError("prior and target dimensions differ")
    net = VelocityNet.init(_net_config(cfg["net"], prior.dim), RngState(cfg["seed"]).child("cli", "init"))
    tc = TrainConfig(cfg["steps"], cfg["batch_size"], cfg["lr"], cfg["seed"], cfg["weight_decay"], "uniform", cfg["lr_decay"])
    correction = None
    if cfg["corrected"]:
        correction = correction_for_training(schedule_from_config(cfg["schedule"]), _source(prior, cfg["target"]))
    res = train_rectified_flow(net, prior, target, tc, correction=correction)
    ckpt = out / "net.twfc"
    save_net(net, ckpt)
    _write_rows(out / "loss.csv", [{"step": i, "value": v, "seed": cfg["seed"]} for i, v in enumerate(res.losses)])
    return {"artifacts": [str(ckpt), str(ckpt) + ".manifest.json", str(out / "loss.csv")], "final_loss": res.losses[-1]}


def cmd_sample(cfg: dict, out: Path) -> dict:
    net = load_net(cfg["checkpoint"])
    prior = _prior_for(cfg["prior"], net.config.dim)
    steps = cfg["steps"] if isinstance(cfg["steps"], list) else [cfg["steps"]]
    x0 = dist.sample(prior, cfg["n"], RngState(cfg["seed"]).child("cli", "sample"))
    student = None
    if cfg["corrected"]:
        from .distill import StudentNet

        student = StudentNet(net, True, schedule_from_config(cfg["schedule"]), _source(prior, cfg["target"]))
    reports, artifacts = [], []
    for k in steps:
        xs, rep = k_step_sample(student or net, x0, k)
        path = out / f"samples_k{k}.csv"
        write_samples(path, xs)
        reports.append(rep)
        artifacts.append(str(path))
    write_nfe_csv(out / "nfe.csv", reports)
    with open(out / "nfe.jsonl", "w") as f:
        for r in reports:
            f.write(r.to_json() + "\n")
    summary = {"nfe": {r.sampler: r.evaluations // cfg["n"] for r in reports}}
    if len(reports) > 1:
        slow = max(reports, key=lambda r: r.steps)
        fast = min(reports, key=lambda r: r.steps)
        summary["wall_clock_ratio"] = slow.seconds / fast.seconds if fast.seconds > 0 else float("inf")
    return {"artifacts": artifacts + [str(out / "nfe.csv"), str(out / "nfe.jsonl")], **summary}


def cmd_distill(cfg: dict, out: Path) -> dict:
    teacher = load_net(cfg["teacher"])
    prior = _prior_for(cfg["prior"], teacher.config.dim)
    schedule = source = None
    if cfg["tweedie"]:
        schedule, source = schedule_from_config(cfg["schedule"]), _source(prior, cfg["target"])
    dc = DistillConfig(
        steps=cfg["steps"],
        batch_size=cfg["batch_size"],
        lr=cfg["lr"],
        seed=cfg["seed"],
        n_pairs=cfg["n_pairs"],
        teacher_steps=cfg["teacher_steps"],
        one_step_fraction=cfg["one_step_fraction"],
        ks=tuple(cfg["ks"]),
        student_hidden=None if cfg["student_hidden"] is None else tuple(cfg["student_hidden"]),
        tweedie=cfg["tweedie"],
        cache_dir=cfg["cache_dir"] or str(out / "pair_cache"),
    )
    before = teacher.checksum()
    student = distill(teacher, schedule, source, dc, prior=prior)
    if teacher.checksum() != before:
        raise InvariantError("distillation mutated the teacher")
    ckpt = out / "student.twfc"
    save_net(student.net, ckpt)
    return {"artifacts": [str(ckpt), str(ckpt) + ".manifest.json"], "tweedie": student.tweedie}


def _stage_cfg(cfg: dict, steps_key: str = "steps") -> adapt.StageConfig:
    return adapt.StageConfig(cfg[steps_key], cfg["batch_size"], cfg["lr"], cfg["seed"], cfg["t_max"], "cosine", cfg["window"])


def cmd_stage1(cfg: dict, out: Path) -> dict:
    ds = experiments.stage_dataset(cfg["data"])
    data = experiments.stage1_data(ds, severity_visible=cfg["severity_visible"])
    net = VelocityNet.init(_net_config(cfg["net"], data.z0.shape[1], adapt.STAGE_COND_DIM), RngState(cfg["seed"]).child("cli", "stage1"))
    w = adapt.StageWeights(**cfg["weights"])
    sc = _stage_cfg(cfg)
    ewc = None
    if cfg["ewc"]["lam"] > 0:
        # anchor: a first pass on the data without the penalty
        half = adapt.StageConfig(sc.steps // 2, sc.batch_size, sc.lr, sc.seed, sc.t_max, sc.lr_decay, sc.window)
        adapt.stage1_train(net, data, half, adapt.StageWeights(w.diff, w.l2, w.ssim, 0.0), rng_path=("adapt", "stage1", "anchor"))
        ewc = experiments.stage_ewc_state(net, data, cfg["ewc"], cfg["seed"])
        sc = adapt.StageConfig(sc.steps - half.steps, sc.batch_size, sc.lr, sc.seed, sc.t_max, sc.lr_decay, sc.window)
    trace = adapt.stage1_train(net, data, sc, w, ewc)
    ckpt = out / "base.twfc"
    save_net(net, ckpt)
    trace.write_csv(out / "stage1_trace.csv")
    res = {"artifacts": [str(ckpt), str(ckpt) + ".manifest.json", str(out / "stage1_trace.csv")]}
    if ewc is not None:
        res["layer_modes"] = ewc.modes
    return res


def cmd_stage2(cfg: dict, out: Path) -> dict:
    base_path = Path(cfg["base"])
    file_before = file_sha256(base_path)
    base = load_net(base_path)
    ds = experiments.stage_dataset(cfg["data"])
    data = adapt.StageData.from_samples(ds.split("train"))
    adapters = adapt.AdapterSet.init(base, cfg["rank"], RngState(cfg["seed"]).child("cli", "adapters"), cfg["alpha"])
    weights = adapt.Stage2Weights.combo(cfg["loss"], **cfg["weights"])
    res = adapt.stage2_train(base, adapters, data, weights, _stage_cfg(cfg))
    file_after = file_sha256(base_path)
    freeze_ok = res.freeze_ok and file_before == file_after
    if not freeze_ok:
        raise InvariantError("base checkpoint changed on disk during adapter training")
    ckpt = out / "adapters.twfc"
    adapt.save_adapters(ckpt, adapters, base)
    res.trace.write_csv(out / "stage2_trace.csv")
    return {
        "artifacts": [str(ckpt), str(ckpt) + ".manifest.json", str(out / "stage2_trace.csv")],
        "freeze_integrity": {"ok": freeze_ok, "base_file_sha256": file_after, "base_param_sha256": res.base_checksum},
        "trainable_parameters": adapters.num_params,
    }


def cmd_eval(cfg: dict, out: Path) -> dict:
    xs = read_samples(cfg["samples"])
    if cfg["reference"]:
        ref = read_samples(cfg["reference"])
    elif cfg["target"] is not None:
        ref = dist.sample(config.dist_from_config(cfg["target"]), cfg["n_ref"], RngState(cfg["seed"]).child("cli", "eval_ref"))
    else:
        raise ConfigError("eval needs a reference samples file or a target distribution")
    path = out / "metrics.jsonl"
    values = {}
    with open(path, "w") as f:
        for name in cfg["metrics"]:
            rep = metrics.metric_report(name, xs, ref, seed=cfg["seed"])
            values[name] = rep.value
            f.write(rep.to_json() + "\n")
    return {"artifacts": [str(path)], "metrics": values}


def cmd_ablate(cfg: dict, out: Path) -> dict:
    rows, cells = experiments.ablation_grid(cfg)
    path, per_seed = out / "ablation.csv", out / "ablation_seeds.csv"
    _write_rows(path, cells)
    _write_rows(per_seed, rows)
    return {"artifacts": [str(path), str(per_seed)], "cells": len(cells), "failed_runs": sum(1 for r in rows if r["failed"])}


def cmd_gen_phantoms(cfg: dict, out: Path) -> dict:
    ds = phantom.build_dataset(cfg["n"], cfg["severity_mix"], cfg["seed"], cfg["size"])
    manifest = phantom.export_dataset(out / "phantoms", ds)
    return {"artifacts": [str(manifest)], "splits": {k: len(v) for k, v in ds.splits.items()}}


def cmd_report(cfg: dict, out: Path) -> dict:
    runs = []
    for r in cfg["runs"]:
        m = Path(r) / MANIFEST
        if not m.exists():
            raise ConfigError(f"{r} holds no run manifest")
        entry = json.loads(m.read_text())
        for extra in ("metrics.jsonl", "nfe.jsonl"):
            p = Path(r) / extra
            if p.exists():
                entry[extra.split(".")[0]] = [json.loads(line) for line in p.read_text().splitlines() if line]
        ab = Path(r) / "ablation.csv"
        if ab.exists():
            with open(ab) as f:
                entry["ablation"] = list(csv.DictReader(f))
        runs.append(entry)
    path = out / "report.json"
    path.write_text(json.dumps({"runs": runs}, indent=2, sort_keys=True))
    lines = ["| command | seed | status | config |", "|---|---|---|---|"]
    lines += [f"| {e['command']} | {e['seed']} | {e['status']} | {e['config_hash'][:12]} |" for e in runs]
    (out / "report.md").write_text("\n".join(lines) + "\n")
    return {"artifacts": [str(path), str(out / "report.md")], "runs": len(runs)}


HANDLERS = {
    "train-flow": cmd_train_flow,
    "sample": cmd_sample,
    "distill": cmd_distill,
    "stage1": cmd_stage1,
    "stage2": cmd_stage2,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gen-phantoms": cmd_gen_phantoms,
    "report": cmd_report,
}


# ---------------------------------------------------------------- runner


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def run(command: str, cfg: dict, force: bool = False, overrides: dict | None = None) -> dict:
    """Execute one validated command in its run directory and write the manifest."""
    out = Path(cfg.get("out") or f"runs/{command}")
    h = config.config_hash(cfg)
    mpath = out / MANIFEST
    if mpath.exists() and not force:
        old = json.loads(mpath.read_text()).get("config_hash", "")
        same = "the same" if old == h else "a different"
        raise ConfigError(f"{out} already holds a run with {same} config hash; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    if mpath.exists():
        mpath.unlink()
    started = _now()
    t0 = time.perf_counter()
    result = HANDLERS[command](cfg, out)
    manifest = {
        "command": command,
        "config_hash": h,
        "config": cfg,
        "precedence": config.PRECEDENCE,
        "overrides": overrides or {},
        "code_version": __version__,
        "seed": cfg["seed"],
        "started": started,
        "finished": _now(),
        "seconds": time.perf_counter() - t0,
        "status": "ok",
        **result,
    }
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=float))
    return manifest


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tweedieflow", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", type=Path)
        s.add_argument("--seed", type=int)
        s.add_argument("--out", type=str)
        s.add_argument("--steps", type=int)
        s.add_argument("--corrected", action="store_true", default=None)
        s.add_argument("--rank", type=int)
        s.add_argument("--force", action="store_true")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def _flag_overrides(command: str, args) -> dict:
    flags = {"seed": args.seed, "out": args.out}
    if args.steps is not None:
        flags["steps"] = [args.steps] if command == "sample" else args.steps
    if args.corrected:
        flags["corrected"] = True
    if args.rank is not None:
        flags["rank"] = args.rank
    return {k: v for k, v in flags.items() if v is not None}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        file_cfg = config.load_file(args.config) if args.config else {}
        flags = _flag_overrides(args.command, args)
        cfg = config.resolve(args.command, file_cfg, flags)
        manifest = run(args.command, cfg, force=args.force, overrides=flags)
    except TweedieFlowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    summary = {k: v for k, v in manifest.items() if k not in ("config", "artifacts")}
    print(json.dumps(summary, sort_keys=True, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
