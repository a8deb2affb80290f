"""JSON run configurations: defaults, schemas, validation and merging.

Precedence, lowest to highest: command defaults, the ``--config`` file, then
explicit command-line flags. Unknown keys are rejected at every level.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import jsonschema
import numpy as np

from . import distributions as dist
from .errors import ConfigError

PRECEDENCE = "defaults < config file < command-line flags"

_NUM = {"type": "number"}
_POS_INT = {"type": "integer", "minimum": 1}
_NONNEG = {"type": "number", "minimum": 0}
_VEC = {"type": "array", "items": _NUM, "minItems": 1}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


DIST_SCHEMA = {
    "oneOf": [
        _obj({"kind": {"const": "gaussian"}, "mean": _VEC, "variance": {"type": "number", "exclusiveMinimum": 0}}, ["kind", "mean"]),
        _obj(
            {
                "kind": {"const": "gmm"},
                "weights": _VEC,
                "means": {"type": "array", "items": _VEC, "minItems": 1},
                "variances": {"anyOf": [_NUM, _VEC, {"type": "array", "items": _VEC}]},
            },
            ["kind", "weights", "means", "variances"],
        ),
        _obj({"kind": {"const": "ring"}, "radius": _NUM, "sigma": _NUM}, ["kind", "radius"]),
        _obj({"kind": {"const": "checkerboard"}, "cell": _NUM, "extent": {"type": "integer", "minimum": 2}}, ["kind"]),
        _obj({"kind": {"const": "point_mass"}, "location": _VEC}, ["kind", "location"]),
    ]
}

SCHEDULE_SCHEMA = {
    "oneOf": [
        _obj({"kind": {"const": "rectified_linear"}}, ["kind"]),
        _obj({"kind": {"const": "ddpm_cosine"}, "s": _NONNEG}, ["kind"]),
        _obj({"kind": {"const": "custom"}, "table": {"type": "array", "items": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}, "minItems": 2}}, ["kind", "table"]),
    ]
}

NET_SCHEMA = _obj(
    {
        "hidden": {"type": "array", "items": _POS_INT},
        "n_freq": {"type": "integer", "minimum": 0},
        "activation": {"enum": ["silu", "tanh"]},
    }
)

DATA_SCHEMA = _obj(
    {
        "n": {"type": "integer", "minimum": 10},
        "severity_mix": {"type": "array", "items": _NONNEG, "minItems": 4, "maxItems": 4},
        "size": {"type": "integer", "minimum": 8, "multipleOf": 8},
        "seed": {"type": "integer", "minimum": 0},
    }
)

_COMMON = {"seed": {"type": "integer", "minimum": 0}, "out": {"type": "string"}}

GMM_BENCHMARK = {"kind": "gmm", "weights": [0.5, 0.5], "means": [[-2.0, 0.0], [2.0, 0.0]], "variances": 0.25}
STANDARD_2D = {"kind": "gaussian", "mean": [0.0, 0.0], "variance": 1.0}
STAGE_DATA = {"n": 1000, "severity_mix": [0.25, 0.25, 0.25, 0.25], "size": 8, "seed": 0}
# spatial and temporal losses scale as dt^2, so their weights are large
STAGE2_WEIGHTS = {"spatial": 1000.0, "consistency": 0.1, "temporal": 1000.0, "l2": 0.0, "ssim": 0.0}
STAGE_TRAIN = {"steps": 3000, "batch_size": 64, "lr": 3e-3, "t_max": 100, "window": 4}

DEFAULTS: dict[str, dict] = {
    "train-flow": {
        "seed": 0,
        "prior": STANDARD_2D,
        "target": GMM_BENCHMARK,
        "net": {"hidden": [64, 64], "n_freq": 4, "activation": "silu"},
        "steps": 2000,
        "batch_size": 256,
        "lr": 1e-3,
        "lr_decay": "constant",
        "weight_decay": 0.0,
        "corrected": False,
        "schedule": {"kind": "rectified_linear"},
    },
    "sample": {
        "seed": 0,
        "checkpoint": "",
        "prior": None,
        "target": GMM_BENCHMARK,
        "n": 1000,
        "steps": [50],
        "corrected": False,
        "schedule": {"kind": "rectified_linear"},
    },
    "distill": {
        "seed": 0,
        "teacher": "",
        "prior": None,
        "target": GMM_BENCHMARK,
        "steps": 8000,
        "batch_size": 256,
        "lr": 1e-3,
        "n_pairs": 16384,
        "teacher_steps": 50,
        "one_step_fraction": 0.25,
        "ks": [1, 2, 4],
        "student_hidden": None,
        "tweedie": False,
        "schedule": {"kind": "rectified_linear"},
        "cache_dir": None,
    },
    "stage1": {
        "seed": 0,
        "data": STAGE_DATA,
        "net": {"hidden": [256, 256], "n_freq": 4, "activation": "silu"},
        **STAGE_TRAIN,
        "severity_visible": False,
        "weights": {"diff": 1.0, "l2": 0.0, "ssim": 0.0, "ewc": 0.0},
        "ewc": {"lam": 0.0, "fisher_batches": 64, "selective": True},
    },
    "stage2": {
        "seed": 0,
        "base": "",
        "data": STAGE_DATA,
        **STAGE_TRAIN,
        "rank": 64,
        "alpha": None,
        "loss": "all",
        "weights": STAGE2_WEIGHTS,
    },
    "eval": {
        "seed": 0,
        "samples": "",
        "reference": "",
        "target": GMM_BENCHMARK,
        "n_ref": 2000,
        "metrics": ["mmd2", "sliced_wasserstein", "toy_fid"],
    },
    "ablate": {
        "seed": 0,
        "seeds": [0, 1],
        "data": STAGE_DATA,
        "net": {"hidden": [256, 256], "n_freq": 4, "activation": "silu"},
        "stage1_steps": 3000,
        "stage2_steps": 1500,
        "batch_size": 64,
        "lr": 3e-3,
        "t_max": 100,
        "window": 4,
        "n_finetune": 150,
        "alpha": None,
        "grid": {"stage1": [True], "tweedie": [True], "loss": ["diff", "all"], "rank": [64]},
        "weights": STAGE2_WEIGHTS,
    },
    "gen-phantoms": {"seed": 0, "n": 100, "severity_mix": [0.25, 0.25, 0.25, 0.25], "size": 32},
    "report": {"seed": 0, "runs": []},
}

_NULLABLE_DIST = {"anyOf": [{"type": "null"}, DIST_SCHEMA]}
_STEPS_LIST = {"anyOf": [_POS_INT, {"type": "array", "items": _POS_INT, "minItems": 1}]}
_STAGE_PROPS = {
    "steps": {"type": "integer", "minimum": 0},
    "batch_size": _POS_INT,
    "lr": {"type": "number", "exclusiveMinimum": 0},
    "t_max": _POS_INT,
    "window": _POS_INT,
}
_S2_WEIGHTS = _obj({k: _NONNEG for k in ("spatial", "consistency", "temporal", "l2", "ssim")})

SCHEMAS: dict[str, dict] = {
    "train-flow": _obj(
        {
            **_COMMON,
            "prior": DIST_SCHEMA,
            "target": DIST_SCHEMA,
            "net": NET_SCHEMA,
            "steps": {"type": "integer", "minimum": 1},
            "batch_size": _POS_INT,
            "lr": {"type": "number", "exclusiveMinimum": 0},
            "lr_decay": {"enum": ["constant", "cosine"]},
            "weight_decay": _NONNEG,
            "corrected": {"type": "boolean"},
            "schedule": SCHEDULE_SCHEMA,
        }
    ),
    "sample": _obj(
        {
            **_COMMON,
            "checkpoint": {"type": "string", "minLength": 1},
            "prior": _NULLABLE_DIST,
            "target": _NULLABLE_DIST,
            "n": _POS_INT,
            "steps": _STEPS_LIST,
            "corrected": {"type": "boolean"},
            "schedule": SCHEDULE_SCHEMA,
        }
    ),
    "distill": _obj(
        {
            **_COMMON,
            "teacher": {"type": "string", "minLength": 1},
            "prior": _NULLABLE_DIST,
            "target": _NULLABLE_DIST,
            "steps": {"type": "integer", "minimum": 0},
            "batch_size": _POS_INT,
            "lr": {"type": "number", "exclusiveMinimum": 0},
            "n_pairs": _POS_INT,
            "teacher_steps": _POS_INT,
            "one_step_fraction": {"type": "number", "minimum": 0, "maximum": 1},
            "ks": {"type": "array", "items": _POS_INT},
            "student_hidden": {"anyOf": [{"type": "null"}, {"type": "array", "items": _POS_INT, "minItems": 1}]},
            "tweedie": {"type": "boolean"},
            "schedule": SCHEDULE_SCHEMA,
            "cache_dir": {"type": ["string", "null"]},
        }
    ),
    "stage1": _obj(
        {
            **_COMMON,
            "data": DATA_SCHEMA,
            "net": NET_SCHEMA,
            **_STAGE_PROPS,
            "severity_visible": {"type": "boolean"},
            "weights": _obj({k: _NONNEG for k in ("diff", "l2", "ssim", "ewc")}),
            "ewc": _obj({"lam": _NONNEG, "fisher_batches": _POS_INT, "selective": {"type": "boolean"}}),
        }
    ),
    "stage2": _obj(
        {
            **_COMMON,
            "base": {"type": "string", "minLength": 1},
            "data": DATA_SCHEMA,
            **_STAGE_PROPS,
            "rank": _POS_INT,
            "alpha": {"anyOf": [{"type": "null"}, {"type": "number", "exclusiveMinimum": 0}]},
            "loss": {"enum": ["diff", "diff+spatial", "diff+consistency", "all"]},
            "weights": _S2_WEIGHTS,
        }
    ),
    "eval": _obj(
        {
            **_COMMON,
            "samples": {"type": "string", "minLength": 1},
            "reference": {"type": "string"},
            "target": _NULLABLE_DIST,
            "n_ref": _POS_INT,
            "metrics": {"type": "array", "items": {"enum": ["mmd2", "sliced_wasserstein", "toy_fid"]}, "minItems": 1},
        }
    ),
    "ablate": _obj(
        {
            **_COMMON,
            "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
            "data": DATA_SCHEMA,
            "net": NET_SCHEMA,
            "stage1_steps": {"type": "integer", "minimum": 0},
            "stage2_steps": {"type": "integer", "minimum": 0},
            "batch_size": _POS_INT,
            "lr": {"type": "number", "exclusiveMinimum": 0},
            "t_max": _POS_INT,
            "window": _POS_INT,
            "n_finetune": {"type": "integer", "minimum": 10},
            "alpha": {"anyOf": [{"type": "null"}, {"type": "number", "exclusiveMinimum": 0}]},
            "grid": _obj(
                {
                    "stage1": {"type": "array", "items": {"type": "boolean"}, "minItems": 1},
                    "tweedie": {"type": "array", "items": {"type": "boolean"}, "minItems": 1},
                    "loss": {"type": "array", "items": {"enum": ["diff", "diff+spatial", "diff+consistency", "all"]}, "minItems": 1},
                    "rank": {"type": "array", "items": _POS_INT, "minItems": 1},
                }
            ),
            "weights": _S2_WEIGHTS,
        }
    ),
    "gen-phantoms": _obj(
        {
            **_COMMON,
            "n": {"type": "integer", "minimum": 10},
            "severity_mix": {"type": "array", "items": _NONNEG, "minItems": 4, "maxItems": 4},
            "size": {"type": "integer", "minimum": 8, "multipleOf": 8},
        }
    ),
    "report": _obj({**_COMMON, "runs": {"type": "array", "items": {"type": "string"}}}),
}


def _deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("prior", "target", "schedule"):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(command: str, cfg: dict) -> None:
    if command not in SCHEMAS:
        raise ConfigError(f"unknown command {command!r}")
    try:
        jsonschema.validate(cfg, SCHEMAS[command])
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from None


def load_file(path: str | Path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return data


def resolve(command: str, file_cfg: dict | None = None, flags: dict | None = None) -> dict:
    """Merge defaults, file and flags, validating each layer and the result."""
    file_cfg = file_cfg or {}
    validate(command, _deep_merge(DEFAULTS[command], file_cfg))
    merged = _deep_merge(DEFAULTS[command], file_cfg)
    merged = _deep_merge(merged, {k: v for k, v in (flags or {}).items() if v is not None})
    validate(command, merged)
    return merged


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def dist_from_config(d: dict) -> dist.DistributionSpec:
    kind = d["kind"]
    if kind == "gaussian":
        return dist.IsotropicGaussian(np.asarray(d["mean"], dtype=np.float64), float(d.get("variance", 1.0)))
    if kind == "gmm":
        return dist.GaussianMixture(d["weights"], d["means"], d["variances"])
    if kind == "ring":
        return dist.Ring(float(d["radius"]), float(d.get("sigma", 0.1)))
    if kind == "checkerboard":
        return dist.Checkerboard(float(d.get("cell", 1.0)), int(d.get("extent", 4)))
    if kind == "point_mass":
        return dist.PointMass(np.asarray(d["location"], dtype=np.float64))
    raise ConfigError(f"unknown distribution kind {kind!r}")
