"""Named presets and the JSON config format with preset inheritance.

A config file is a JSON object that names a preset and overrides any
subset of its keys, e.g. ``{"preset": "semantickitti", "rv":
{"width": 1024}}``.  Angles are written in degrees on disk and
converted when the typed configs are built.
"""

from __future__ import annotations

import copy
import json
import math

from .bev import BevGridConfig
from .ingest import CLASSMAP_PRESETS, ClassMap, ConfigError, SynthConfig
from .rv import RvSensorConfig

PRESETS: dict[str, dict] = {
    "semantickitti": {
        "classmap": "semantickitti",
        "rv": {"height": 64, "width": 2048, "fov_up_deg": 3.0, "fov_down_deg": -25.0},
        "bev": {
            "radial_bins": 480,
            "angular_bins": 360,
            "z_bins": 32,
            "radius_min": 3.0,
            "radius_max": 50.0,
            "z_min": -3.0,
            "z_max": 1.5,
        },
        "synth": {
            "num_beams": 64,
            "points_per_beam": 2048,
            "fov_up_deg": 3.0,
            "fov_down_deg": -25.0,
        },
    },
    "nuscenes": {
        "classmap": "nuscenes",
        "rv": {"height": 32, "width": 1024, "fov_up_deg": 10.0, "fov_down_deg": -30.0},
        "bev": {
            "radial_bins": 480,
            "angular_bins": 360,
            "z_bins": 32,
            "radius_min": 0.0,
            "radius_max": 50.0,
            "z_min": -5.0,
            "z_max": 3.0,
        },
        "synth": {
            "num_beams": 32,
            "points_per_beam": 1024,
            "fov_up_deg": 10.0,
            "fov_down_deg": -30.0,
        },
    },
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(preset: str = "semantickitti", path=None, overrides: dict | None = None) -> dict:
    """Resolve a preset, an optional config file, and inline overrides."""
    doc = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
        preset = doc.pop("preset", preset)
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    cfg = _deep_merge(PRESETS[preset], doc)
    if overrides:
        cfg = _deep_merge(cfg, overrides)
    return cfg


def rv_config(cfg: dict) -> RvSensorConfig:
    d = cfg["rv"]
    return RvSensorConfig(
        height=int(d["height"]),
        width=int(d["width"]),
        fov_up=math.radians(float(d["fov_up_deg"])),
        fov_down=math.radians(float(d["fov_down_deg"])),
    )


def bev_config(cfg: dict) -> BevGridConfig:
    d = cfg["bev"]
    return BevGridConfig(
        radial_bins=int(d["radial_bins"]),
        angular_bins=int(d["angular_bins"]),
        z_bins=int(d["z_bins"]),
        radius_range=(float(d["radius_min"]), float(d["radius_max"])),
        z_range=(float(d["z_min"]), float(d["z_max"])),
    )


def synth_config(cfg: dict, **kwargs) -> SynthConfig:
    d = dict(cfg["synth"])
    d.update(kwargs)
    return SynthConfig(**d)


def classmap(cfg: dict) -> ClassMap:
    name = cfg["classmap"]
    if isinstance(name, str):
        if name not in CLASSMAP_PRESETS:
            raise ConfigError(f"unknown classmap preset {name!r}")
        return CLASSMAP_PRESETS[name]
    return ClassMap({int(k): int(v) for k, v in name["map"].items()},
                    int(name["num_classes"]), int(name.get("ignore_id", 255)))
