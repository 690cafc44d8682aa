"""Experiment configuration: JSON schema, presets and loading."""
from __future__ import annotations

import copy
import hashlib
import importlib.resources
import json
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from .chain_model import ChainSpec, ConfigurationError, validate_chain

MODES = ("open-loop", "state-feedback", "output-feedback", "assumption-check", "kernels-only")
CLOSED_LOOP = ("state-feedback", "output-feedback")

_NUM = {"type": "number"}
_OPT_NUM = {"type": ["number", "null"]}

SCHEMA = {
    "type": "object",
    "required": ["chain", "mode"],
    "additionalProperties": False,
    "properties": {
        "chain": {"oneOf": [{"type": "string"}, {"type": "object", "required": ["subsystems"]}]},
        "mode": {"enum": list(MODES)},
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"nx": {"type": "integer", "minimum": 11}, "dt": {"type": ["number", "null"], "exclusiveMinimum": 0}},
        },
        "T": {"type": "number", "exclusiveMinimum": 0},
        "ic": {"type": "object", "properties": {"kind": {"type": "string"}}},
        "controller": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "t_act": _OPT_NUM,
                "input_delay": {"type": "number", "minimum": 0},
                "ramp": {"type": "number", "minimum": 0},
                "filter": {"type": "boolean"},
                "filter_order": {"type": "integer", "minimum": 1},
                "filter_bandwidth": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "observer": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"tau": _OPT_NUM},
        },
        "uncertainty_pct": {"type": "number", "minimum": 0, "maximum": 100},
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dir": {"type": "string"},
                "snapshot_every": {"type": ["integer", "null"], "minimum": 1},
                "kernel_cache": {"type": ["string", "null"]},
            },
        },
        "seed": {"type": "integer"},
    },
}

DEFAULTS = {
    "grid": {"nx": 101, "dt": None},
    "T": 20.0,
    "ic": {"kind": "sine"},
    "controller": {"t_act": None, "input_delay": 0.0, "ramp": 1.0, "filter": False,
                   "filter_order": 4, "filter_bandwidth": 125.0},
    "observer": {"tau": None},
    "uncertainty_pct": 0.0,
    "output": {"dir": "out", "snapshot_every": None, "kernel_cache": None},
    "seed": 0,
}


def preset_names() -> list[str]:
    root = importlib.resources.files("hypchain") / "presets"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_preset(name: str) -> dict:
    """Chain description of a bundled preset."""
    res = importlib.resources.files("hypchain") / "presets" / f"{name}.json"
    if not res.is_file():
        raise ConfigurationError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return json.loads(res.read_text())


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "ic":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def schema_errors(raw: dict) -> list[str]:
    """Schema violations as ``"/json/pointer: message"`` strings."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    out = []
    for err in sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path)):
        pointer = "/" + "/".join(str(p) for p in err.absolute_path)
        out.append(f"{pointer}: {err.message}")
    return out


@dataclass
class ExperimentConfig:
    chain: ChainSpec
    mode: str
    nx: int
    dt: float | None
    T: float
    ic: dict
    controller: dict
    observer: dict
    uncertainty_pct: float
    output: dict
    seed: int
    raw: dict = field(repr=False, default_factory=dict)

    @property
    def digest(self) -> str:
        """Hash of the fully resolved configuration."""
        blob = json.dumps(self.resolved(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def resolved(self) -> dict:
        out = copy.deepcopy(self.raw)
        out["chain"] = self.chain.to_dict()
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        errs = schema_errors(raw)
        if errs:
            raise ConfigurationError("invalid configuration: " + "; ".join(errs))
        cfg = _merge(DEFAULTS, raw)
        chain_obj = load_preset(cfg["chain"]) if isinstance(cfg["chain"], str) else cfg["chain"]
        spec = ChainSpec.from_dict(chain_obj)
        validate_chain(spec)
        out = cls(spec, cfg["mode"], int(cfg["grid"]["nx"]), cfg["grid"]["dt"], float(cfg["T"]), cfg["ic"],
                  cfg["controller"], cfg["observer"], float(cfg["uncertainty_pct"]), cfg["output"],
                  int(cfg["seed"]), cfg)
        t_act = out.controller["t_act"]
        if out.mode in CLOSED_LOOP and t_act is not None and out.T <= t_act:
            raise ConfigurationError(f"horizon T={out.T} does not exceed the activation time {t_act}")
        return out


def load_config(path) -> ExperimentConfig:
    """Parse and validate an experiment file."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigurationError(f"configuration file {str(path)!r} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: not valid JSON ({exc})") from None
    return ExperimentConfig.from_dict(raw)
