from __future__ import annotations

import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from tweedieflow import cli, config
from tweedieflow.errors import ConfigError, DivergenceError, InvariantError, NumericError, StateError

SMALL_NET = {"hidden": [16], "n_freq": 2}
SMALL_DATA = {"n": 200, "severity_mix": [0.25, 0.25, 0.25, 0.25], "size": 8, "seed": 0}


def write_cfg(path, cfg: dict):
    path.write_text(json.dumps(cfg))
    return str(path)


def run_cli(*argv) -> int:
    return cli.main([str(a) for a in argv])


def manifest(out) -> dict:
    return json.loads((out / "run.json").read_text())


@pytest.fixture
def trained(tmp_path):
    out = tmp_path / "flow"
    cfg = write_cfg(tmp_path / "flow.json", {"steps": 200, "net": SMALL_NET, "batch_size": 64})
    assert run_cli("train-flow", "--config", cfg, "--out", out) == 0
    return out


def test_exit_codes_of_error_classes():
    assert ConfigError("x").exit_code == 2
    assert NumericError("x").exit_code == DivergenceError("x").exit_code == 3
    assert InvariantError("x").exit_code == 4
    assert StateError("x").exit_code == 1


def test_precedence_and_unknown_keys():
    merged = config.resolve("train-flow", {"steps": 10, "lr": 0.5}, {"steps": 20})
    assert merged["steps"] == 20 and merged["lr"] == 0.5 and merged["batch_size"] == 256
    with pytest.raises(ConfigError):
        config.resolve("train-flow", {"stepz": 10})
    with pytest.raises(ConfigError):
        config.resolve("stage2", {"rank": -1})


def test_config_hash_is_order_independent():
    assert config.config_hash({"a": 1, "b": [1, 2]}) == config.config_hash({"b": [1, 2], "a": 1})


def test_train_flow_smoke_and_determinism(tmp_path, trained):
    assert (trained / "net.twfc").exists() and (trained / "loss.csv").exists()
    m = manifest(trained)
    assert m["status"] == "ok" and m["command"] == "train-flow" and m["precedence"].startswith("defaults")
    again = tmp_path / "flow2"
    assert run_cli("train-flow", "--config", tmp_path / "flow.json", "--out", again) == 0
    assert (trained / "net.twfc").read_bytes() == (again / "net.twfc").read_bytes()
    rows = list(csv.DictReader(open(trained / "loss.csv")))
    assert len(rows) == 200 and set(rows[0]) == {"step", "value", "seed"}


def test_malformed_config_exit_2(tmp_path):
    cfg = write_cfg(tmp_path / "bad.json", {"rank": -3})
    assert run_cli("stage2", "--config", cfg, "--out", tmp_path / "x") == 2
    assert run_cli("train-flow", "--config", tmp_path / "missing.json") == 2
    (tmp_path / "junk.json").write_text("{not json")
    assert run_cli("train-flow", "--config", tmp_path / "junk.json") == 2


def test_manifest_refuses_overwrite(tmp_path, trained):
    cfg = tmp_path / "flow.json"
    assert run_cli("train-flow", "--config", cfg, "--out", trained) == 2
    assert run_cli("train-flow", "--config", cfg, "--out", trained, "--force") == 0


def test_sample_nfe_and_determinism(tmp_path, trained):
    ck = str(trained / "net.twfc")
    cfg = write_cfg(tmp_path / "s.json", {"checkpoint": ck, "steps": [50, 4], "n": 500})
    out = tmp_path / "s"
    assert run_cli("sample", "--config", cfg, "--out", out) == 0
    m = manifest(out)
    assert m["nfe"] == {"euler-50": 50, "euler-4": 4}
    assert m["wall_clock_ratio"] > 1
    again = tmp_path / "s2"
    assert run_cli("sample", "--config", cfg, "--out", again) == 0
    assert (out / "samples_k4.csv").read_bytes() == (again / "samples_k4.csv").read_bytes()
    nfe = [json.loads(line) for line in (out / "nfe.jsonl").read_text().splitlines()]
    assert [r["evaluations"] for r in nfe] == [25000, 2000]


def test_steps_flag_overrides_file(tmp_path, trained):
    cfg = write_cfg(tmp_path / "s.json", {"checkpoint": str(trained / "net.twfc"), "steps": [50], "n": 50})
    out = tmp_path / "s"
    assert run_cli("sample", "--config", cfg, "--out", out, "--steps", 3) == 0
    assert manifest(out)["nfe"] == {"euler-3": 3}


def test_corrected_flag_with_degenerate_schedule(tmp_path, trained):
    base = {"checkpoint": str(trained / "net.twfc"), "steps": [5], "n": 100}
    plain = write_cfg(tmp_path / "p.json", base)
    ones = write_cfg(tmp_path / "c.json", {**base, "schedule": {"kind": "custom", "table": [[0, 1], [1, 1]]}})
    assert run_cli("sample", "--config", plain, "--out", tmp_path / "p") == 0
    assert run_cli("sample", "--config", ones, "--out", tmp_path / "c", "--corrected") == 0
    assert (tmp_path / "p" / "samples_k5.csv").read_bytes() == (tmp_path / "c" / "samples_k5.csv").read_bytes()
    assert run_cli("sample", "--config", plain, "--out", tmp_path / "c2", "--corrected") == 0
    assert (tmp_path / "p" / "samples_k5.csv").read_bytes() != (tmp_path / "c2" / "samples_k5.csv").read_bytes()


def test_missing_checkpoint_is_config_error(tmp_path):
    cfg = write_cfg(tmp_path / "s.json", {"checkpoint": str(tmp_path / "none.twfc")})
    assert run_cli("sample", "--config", cfg, "--out", tmp_path / "s") == 2


def test_distill_and_eval(tmp_path, trained):
    cfg = write_cfg(tmp_path / "d.json", {"teacher": str(trained / "net.twfc"), "steps": 50, "n_pairs": 256, "teacher_steps": 10})
    out = tmp_path / "d"
    assert run_cli("distill", "--config", cfg, "--out", out) == 0
    assert (out / "student.twfc").exists() and any((out / "pair_cache").iterdir())

    x = np.random.default_rng(0).standard_normal((300, 2))
    cli.write_samples(tmp_path / "x.csv", x)
    ev = write_cfg(tmp_path / "e.json", {"samples": str(tmp_path / "x.csv"), "reference": str(tmp_path / "x.csv")})
    assert run_cli("eval", "--config", ev, "--out", tmp_path / "e") == 0
    values = manifest(tmp_path / "e")["metrics"]
    assert abs(values["mmd2"]) <= 1e-12 and values["sliced_wasserstein"] == 0.0 and values["toy_fid"] <= 1e-8


def test_stage_pipeline_freeze_integrity(tmp_path):
    s1 = write_cfg(tmp_path / "s1.json", {"data": SMALL_DATA, "net": {"hidden": [32]}, "steps": 20, "ewc": {"lam": 1.0, "fisher_batches": 4}})
    assert run_cli("stage1", "--config", s1, "--out", tmp_path / "s1") == 0
    assert len(manifest(tmp_path / "s1")["layer_modes"]) == 2
    base = tmp_path / "s1" / "base.twfc"
    before = base.read_bytes()
    s2 = write_cfg(tmp_path / "s2.json", {"base": str(base), "data": SMALL_DATA, "steps": 10, "rank": 4})
    assert run_cli("stage2", "--config", s2, "--out", tmp_path / "s2") == 0
    m = manifest(tmp_path / "s2")
    assert m["freeze_integrity"]["ok"] is True
    assert base.read_bytes() == before
    shapes = [(32, 64 + 8 + 69), (64, 32)]
    assert m["trainable_parameters"] == sum(4 * (a + b) for a, b in shapes)
    assert run_cli("stage2", "--config", s2, "--out", tmp_path / "s2b", "--rank", 2) == 0
    assert manifest(tmp_path / "s2b")["trainable_parameters"] == m["trainable_parameters"] // 2


def test_ablate_two_cells_two_seeds(tmp_path):
    cfg = write_cfg(tmp_path / "a.json", {
        "seeds": [0, 1], "data": SMALL_DATA, "net": {"hidden": [16]}, "stage1_steps": 10, "stage2_steps": 5,
        "n_finetune": 40, "grid": {"loss": ["diff", "all"], "rank": [4]},
    })
    out = tmp_path / "a"
    assert run_cli("ablate", "--config", cfg, "--out", out) == 0
    rows = list(csv.DictReader(open(out / "ablation.csv")))
    assert len(rows) == 2 and all(int(r["seeds"]) == 2 for r in rows)
    assert {r["loss"] for r in rows} == {"diff", "all"}


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_ablate_marks_failed_cells(tmp_path):
    # an absurd learning rate diverges; the cell is marked and the run still completes
    cfg = write_cfg(tmp_path / "a.json", {
        "seeds": [0], "data": {**SMALL_DATA, "n": 40}, "net": {"hidden": [8]}, "stage1_steps": 20, "stage2_steps": 2, "lr": 1e12,
        "n_finetune": 10, "grid": {"loss": ["diff"], "rank": [2]},
    })
    assert run_cli("ablate", "--config", cfg, "--out", tmp_path / "a") == 0
    assert manifest(tmp_path / "a")["failed_runs"] == 1


def test_gen_phantoms_and_report(tmp_path):
    assert run_cli("gen-phantoms", "--out", tmp_path / "g") == 0
    rows = list(csv.DictReader(open(tmp_path / "g" / "phantoms" / "manifest.csv")))
    assert len(rows) == 100
    cfg = write_cfg(tmp_path / "r.json", {"runs": [str(tmp_path / "g")]})
    assert run_cli("report", "--config", cfg, "--out", tmp_path / "r") == 0
    report = json.loads((tmp_path / "r" / "report.json").read_text())
    assert report["runs"][0]["command"] == "gen-phantoms"
    bad = write_cfg(tmp_path / "r2.json", {"runs": [str(tmp_path / "nothing")]})
    assert run_cli("report", "--config", bad, "--out", tmp_path / "r2") == 2


def test_console_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "tweedieflow.cli", "gen-phantoms", "--out", str(tmp_path / "g"), "--seed", "3"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["seed"] == 3
    proc = subprocess.run([sys.executable, "-m", "tweedieflow.cli", "gen-phantoms", "--out", str(tmp_path / "g")], capture_output=True, text=True)
    assert proc.returncode == 2 and "force" in proc.stderr
