"""Run configuration: every default in one versioned JSON document."""

from __future__ import annotations

import copy
import json
from typing import Any, Optional

from sentinel.detector import DetectorConfig
from sentinel.sde import PerturbationSchedule, SdeConfig

CONFIG_SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


def default_config() -> dict:
    return {
        "schema_version": CONFIG_SCHEMA_VERSION,
        "seed": 0,
        "temperature": 1.0,
        "pipeline": {
            "pca_dims": 10,
            "bandwidth": 0.5,
            "ridge": 1e-6,
            "holdout_fraction": 0.1,
        },
        "detector": DetectorConfig().to_dict(),
        "evaluation": {"quorum": 0.5, "subsample": None},
        "simulation": {
            "sde": SdeConfig().to_dict(),
            "schedule": PerturbationSchedule(onset_time=160.0, diffusion_factor=8.0).to_dict(),
            "safe_fit_time": 159.0,
            "n_trials": 50,
            "export_trajectories": 1,
            # Disjoint windows: 200 of them fill the pre-onset period exactly.
            "detector": {"stride": 100},
        },
    }


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in out:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(out[key], dict) and key not in ("sde",) and isinstance(value, dict):
            # simulation.detector is a partial override of detector, so it is open-ended.
            if where == "simulation.detector":
                out[key] = {**out[key], **value}
            else:
                out[key] = _merge(out[key], value, where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> dict:
    """Defaults, then the file at ``path``, then ``overrides`` (nested dict)."""
    cfg = default_config()
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        version = data.get("schema_version", CONFIG_SCHEMA_VERSION)
        if version != CONFIG_SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema_version {version!r}")
        # Echoed configs carry run metadata; it is informational only.
        data = {k: v for k, v in data.items() if k not in ("command", "inputs")}
        cfg = _merge(cfg, data)
    if overrides:
        cfg = _merge(cfg, overrides)
    validate(cfg)
    cfg["simulation"]["sde"] = sde_config(cfg).to_dict()
    return cfg


def validate(cfg: dict) -> None:
    try:
        detector_config(cfg)
        sim_detector_config(cfg)
        sde_config(cfg)
        schedule(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if not cfg["temperature"] > 0:
        raise ConfigError("temperature must be positive")
    p = cfg["pipeline"]
    if not (isinstance(p["pca_dims"], int) and p["pca_dims"] >= 1):
        raise ConfigError("pipeline.pca_dims must be a positive integer")
    if not p["bandwidth"] > 0:
        raise ConfigError("pipeline.bandwidth must be positive")
    if not 0 <= p["holdout_fraction"] < 1:
        raise ConfigError("pipeline.holdout_fraction must be in [0, 1)")
    q = cfg["evaluation"]["quorum"]
    if not 0 <= q < 1:
        raise ConfigError("evaluation.quorum must be in [0, 1)")
    if cfg["simulation"]["n_trials"] < 1:
        raise ConfigError("simulation.n_trials must be >= 1")


def detector_config(cfg: dict) -> DetectorConfig:
    return DetectorConfig(**cfg["detector"])


def sim_detector_config(cfg: dict) -> DetectorConfig:
    return DetectorConfig(**{**cfg["detector"], **cfg["simulation"]["detector"]})


def sde_config(cfg: dict) -> SdeConfig:
    return SdeConfig.from_dict({**cfg["simulation"]["sde"], "seed": cfg["seed"]})


def schedule(cfg: dict) -> PerturbationSchedule:
    return PerturbationSchedule(**cfg["simulation"]["schedule"])


def set_path(cfg: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = value
