"""Experiment configuration: presets, overrides and schema validation."""

from __future__ import annotations

import copy
import json
from importlib import resources
from pathlib import Path
from typing import Any, Dict, Optional

import jsonschema
import yaml

from ..errors import ConfigError

PRESETS = ("desk", "paper")
# mappings whose keys are data rather than settings: an override replaces them whole
REPLACE_WHOLE = {("dataset", "categories")}


def _read_text(name: str) -> str:
    return (resources.files("tactile_recon.pipeline") / name).read_text(encoding="utf-8")


def schema() -> Dict[str, Any]:
    return json.loads(_read_text("schema.json"))


def preset(name: str) -> Dict[str, Any]:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; expected one of {PRESETS}")
    return yaml.safe_load(_read_text(f"{name}.yaml"))


def deep_merge(base: Dict[str, Any], update: Dict[str, Any], _path=()) -> Dict[str, Any]:
    """Recursive dict merge; values from ``update`` win, lists (and ``REPLACE_WHOLE`` maps) are replaced."""
    out = copy.deepcopy(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and _path + (k,) not in REPLACE_WHOLE:
            out[k] = deep_merge(out[k], v, _path + (k,))
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(cfg: Dict[str, Any]) -> None:
    try:
        jsonschema.validate(cfg, schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from None
    lo, hi = cfg["dataset"]["target_range"]
    if not lo <= hi <= cfg["dataset"]["n_in"]:
        raise ConfigError("dataset.target_range must satisfy lo <= hi <= n_in")
    if cfg["exploration"]["inference_from"] > cfg["exploration"]["max_actions"]:
        raise ConfigError("exploration.inference_from exceeds exploration.max_actions")


def load_config(preset_name: str = "desk", path: Optional[str] = None, seed: Optional[int] = None,
                out: Optional[str] = None) -> Dict[str, Any]:
    """Preset, then the YAML/JSON file at ``path``, then ``seed``/``out`` overrides; validated."""
    cfg = preset(preset_name)
    if path is not None:
        try:
            user = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from None
        if user is None:
            user = {}
        if not isinstance(user, dict):
            raise ConfigError(f"config {path} must be a mapping at the top level")
        cfg = deep_merge(cfg, user)
    if seed is not None:
        cfg["seed"] = int(seed)
    if out is not None:
        cfg["output_dir"] = str(out)
    validate(cfg)
    return cfg
