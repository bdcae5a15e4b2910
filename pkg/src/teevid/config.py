"""Run configuration: JSON file merged over defaults, then command-line overrides.

Precedence, lowest to highest: built-in defaults, ``--config`` file,
individual flags. Every section is closed: unknown keys are schema errors.
"""

from __future__ import annotations

import copy
import json
import os
from typing import Any

import jsonschema

from .errors import SchemaError

CONFIG_SCHEMA_VERSION = 1

DEFAULTS: dict[str, Any] = {
    "schema_version": CONFIG_SCHEMA_VERSION,
    "run_id": "run",
    "seed": 0,
    "tau_var": 0.4,
    "corpus": {
        "regimes": ["static", "slow", "fast", "teleport"],
        "videos_per_regime": 16,
        "num_frames": 50,
        "size": 224,
        "noise_sigma": 0.02,
    },
    "suite": {"videos": 5, "num_frames": 100, "static_fraction": 0.9, "noise_sigma": 0.02},
    "sampler": {
        "bin_capacity": 250,
        "initial_interval": 4,
        "interval_min": 1,
        "interval_max": 30,
        "interval_step": 1,
        "ew_decay": 0.9,
        "test_fraction": 0.2,
    },
    "detector_train": {"epochs": 6, "learning_rate": 1e-3, "batch_size": 16, "frame_stride": 8, "box_weight": 5.0},
    "detector": {"kind": "oracle", "jitter_sigma": 0.0, "drop_prob": 0.0},
    "teem": {"hidden_ratio": 0.5, "attention_kernel": 3, "concat": "current", "attention_bias": -2.0},
    "train": {"epochs": 12, "learning_rate": 1e-2, "batch_size": 32},
    "pipeline": {
        "gamma": 0.97,
        "exits": [1, 2, 3, 4],
        "entropy_base": "bits",
        "min_probability": None,
        "gate": "teem",
        "fixed_step": 10,
        "reference": "keyframe",
    },
    "metrics": {"thresholds": [0.35, 0.4, 0.45, 0.5, 0.55, 0.6, 0.65, 0.7, 0.75], "fixed_steps": [7, 10, 20]},
    "cam": {"pairs": 4},
}

_num = {"type": "number"}
_pos_int = {"type": "integer", "minimum": 1}
_prob = {"type": "number", "minimum": 0, "maximum": 1}


def _section(props: dict) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False}


CONFIG_SCHEMA = _section(
    {
        "schema_version": {"const": CONFIG_SCHEMA_VERSION},
        "run_id": {"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"},
        "seed": {"type": "integer", "minimum": 0},
        "tau_var": _prob,
        "corpus": _section(
            {
                "regimes": {
                    "type": "array",
                    "minItems": 1,
                    "items": {"enum": ["static", "slow", "fast", "teleport", "hops"]},
                },
                "videos_per_regime": _pos_int,
                "num_frames": {"type": "integer", "minimum": 2},
                "size": {"type": "integer", "minimum": 16},
                "noise_sigma": {"type": "number", "minimum": 0, "maximum": 0.2},
            }
        ),
        "suite": _section(
            {
                "videos": {"type": "integer", "minimum": 0},
                "num_frames": {"type": "integer", "minimum": 2},
                "static_fraction": _prob,
                "noise_sigma": {"type": "number", "minimum": 0, "maximum": 0.2},
            }
        ),
        "sampler": _section(
            {
                "bin_capacity": _pos_int,
                "initial_interval": _pos_int,
                "interval_min": _pos_int,
                "interval_max": _pos_int,
                "interval_step": _pos_int,
                "ew_decay": _prob,
                "test_fraction": _prob,
            }
        ),
        "detector_train": _section(
            {
                "epochs": _pos_int,
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "batch_size": _pos_int,
                "frame_stride": _pos_int,
                "box_weight": {"type": "number", "minimum": 0},
            }
        ),
        "detector": _section(
            {
                "kind": {"enum": ["toy", "oracle"]},
                "jitter_sigma": {"type": "number", "minimum": 0},
                "drop_prob": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            }
        ),
        "teem": _section(
            {
                "hidden_ratio": {"type": "number", "exclusiveMinimum": 0},
                "attention_kernel": _pos_int,
                "concat": {"enum": ["current", "reference"]},
                "attention_bias": _num,
            }
        ),
        "train": _section(
            {
                "epochs": _pos_int,
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "batch_size": _pos_int,
            }
        ),
        "pipeline": _section(
            {
                "gamma": {"type": "number", "minimum": 0},
                "exits": {
                    "type": "array",
                    "minItems": 1,
                    "uniqueItems": True,
                    "items": {"type": "integer", "minimum": 1, "maximum": 4},
                },
                "entropy_base": {"enum": ["bits", "nats"]},
                "min_probability": {"type": ["number", "null"], "minimum": 0.5, "maximum": 1},
                "gate": {"enum": ["teem", "ground_truth", "fixed_step"]},
                "fixed_step": _pos_int,
                "reference": {"enum": ["keyframe", "sliding"]},
            }
        ),
        "metrics": _section(
            {
                "thresholds": {"type": "array", "minItems": 1, "items": _prob},
                "fixed_steps": {"type": "array", "items": _pos_int},
            }
        ),
        "cam": _section({"pairs": _pos_int}),
    }
)


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(config: dict) -> dict:
    try:
        jsonschema.validate(config, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise SchemaError(f"config {where}: {exc.message}", where) from None
    return config


def load_config(path: str | os.PathLike | None = None, overrides: dict | None = None) -> dict:
    """Defaults, then the file at ``path``, then ``overrides``; validated after each merge."""
    config = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"config is not valid JSON: {exc}", str(path)) from None
        if not isinstance(doc, dict):
            raise SchemaError("config must be a JSON object", str(path))
        validate(doc)
        config = _merge(config, doc)
    if overrides:
        config = _merge(config, overrides)
    return validate(config)


def dump_config(config: dict) -> str:
    return json.dumps(config, indent=1, sort_keys=True) + "\n"
