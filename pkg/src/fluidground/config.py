"""Scene configuration: named presets, strict schema validation, echoing.

Config files are JSON trees. Unknown keys are rejected with their full key
path; every command echoes the fully resolved config into its outputs.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass
from typing import Any, Optional

import numpy as np

from .benchmark import AppearanceModel, CameraRig, build_camera_rig
from .encoding import CENTER_MODES, DEFORMATION_MODES, EncodingConfig
from .errors import ConfigError
from .geometry import Box
from .renderer import FieldNetConfig, RenderConfig
from .sph import MATERIALS, SHAPES, FluidPreset
from .training import TIME_SAMPLING, TrainSchedule
from .transition import TransitionConfig


def _int(v, path):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError("expected an integer", path)
    return v


def _num(v, path):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError("expected a number", path)
    return float(v)


def _bool(v, path):
    if not isinstance(v, bool):
        raise ConfigError("expected true/false", path)
    return v


def _str(v, path):
    if not isinstance(v, str):
        raise ConfigError("expected a string", path)
    return v


def _choice(options):
    def check(v, path):
        if v not in options:
            raise ConfigError(f"expected one of {sorted(options)}, got {v!r}", path)
        return v
    return check


def _vec3(v, path):
    if not (isinstance(v, (list, tuple)) and len(v) == 3):
        raise ConfigError("expected a list of 3 numbers", path)
    return [_num(x, path) for x in v]


def _vec6(v, path):
    if not (isinstance(v, (list, tuple)) and len(v) == 6):
        raise ConfigError("expected a list of 6 numbers (box lo, hi)", path)
    return [_num(x, path) for x in v]


def _events(v, path):
    if not isinstance(v, list):
        raise ConfigError("expected a list of [step, multiplier] pairs", path)
    out = []
    for i, pair in enumerate(v):
        if not (isinstance(pair, (list, tuple)) and len(pair) == 2):
            raise ConfigError("expected [step, multiplier]", f"{path}[{i}]")
        out.append([_int(pair[0], f"{path}[{i}]"), _num(pair[1], f"{path}[{i}]")])
    return out


def _opt(checker):
    def check(v, path):
        return None if v is None else checker(v, path)
    return check


SCHEMA = {
    "preset": _str,
    "seed": _int,
    "resolution": _int,
    "frames": _int,
    "observed": _int,
    "image_set": _choice(("full", "minimal")),
    "pfm": _bool,
    "distance_mode": _choice(("nearest", "indexed")),
    "fluid": {
        "initial_shape": _choice(SHAPES),
        "material": _choice(tuple(MATERIALS)),
        "viscosity": _num,
        "rest_density": _num,
        "particle_radius": _num,
        "box": _vec6,
        "gravity": _vec3,
        "dt": _num,
        "substeps": _int,
        "shape_center": _vec3,
        "shape_size": _num,
        "shape_height": _num,
        "sound_speed": _num,
        "wall_stiffness": _num,
        "wall_damping": _num,
        "jitter": _num,
    },
    "cameras": {
        "n_warmup": _int,
        "ring_radius": _num,
        "ring_z": _num,
        "focal_factor": _num,
        "train_azimuth_deg": _num,
    },
    "appearance": {
        "density_gain": _num,
        "base_color": _vec3,
        "view_tint_gain": _num,
        "background": _vec3,
    },
    "encoding": {
        "levels_x": _int,
        "levels_d": _int,
        "sigma_cap": _num,
        "center_mode": _choice(CENTER_MODES),
        "deformation_mode": _choice(DEFORMATION_MODES),
    },
    "renderer": {
        "depth": _int,
        "width": _int,
        "skip_at": _int,
        "color_hidden": _int,
        "seed": _int,
        "n_coarse": _int,
        "n_fine": _int,
        "rays_per_batch": _int,
        "reference_samples": _int,
    },
    "transition": {
        "channels": _int,
        "kernel_hidden": _int,
        "out_hidden": _int,
        "correction_scale": _num,
        "clamp_radii": _num,
        "seed": _int,
    },
    "schedule": {
        "warmup_steps": _int,
        "joint_steps": _int,
        "lr_renderer": _num,
        "lr_transition": _num,
        "rays_per_batch": _int,
        "renderer_decay": _events,
        "transition_decay": _events,
        "warmup_exp_gamma": _opt(_num),
        "time_sampling": _choice(TIME_SAMPLING),
        "bptt_window": _int,
        "log_every": _int,
        "checkpoint_every": _int,
    },
}

DEFAULTS = {
    "seed": 0,
    "resolution": 64,
    "frames": 60,
    "observed": 50,
    "image_set": "full",
    "pfm": False,
    "distance_mode": "nearest",
    "fluid": {
        "initial_shape": "cube",
        "material": "water",
        "particle_radius": 0.025,
        "box": [-0.5, -0.5, 0.0, 0.5, 0.5, 1.0],
        "gravity": [0.0, 0.0, -9.81],
        "dt": 0.02,
        "substeps": 40,
        "shape_center": [0.0, 0.0, 0.65],
        "shape_size": 0.4,
        "shape_height": 0.4,
        "sound_speed": 20.0,
        "wall_stiffness": 5.0e4,
        "wall_damping": 200.0,
        "jitter": 0.1,
    },
    "cameras": {
        "n_warmup": 4,
        "ring_radius": 2.0,
        "ring_z": 1.05,
        "focal_factor": 1.2,
        "train_azimuth_deg": 36.0,
    },
    "appearance": {
        "density_gain": 0.3,
        "base_color": [0.25, 0.5, 0.85],
        "view_tint_gain": 0.3,
        "background": [1.0, 1.0, 1.0],
    },
    "encoding": {
        "levels_x": 10,
        "levels_d": 4,
        "sigma_cap": 64.0,
        "center_mode": "verbatim",
        "deformation_mode": "scalar",
    },
    "renderer": {
        "depth": 8,
        "width": 256,
        "skip_at": 4,
        "color_hidden": 128,
        "seed": 1,
        "n_coarse": 64,
        "n_fine": 128,
        "rays_per_batch": 1024,
        "reference_samples": 160,
    },
    "transition": {
        "channels": 16,
        "kernel_hidden": 32,
        "out_hidden": 32,
        "correction_scale": 1.0,
        "clamp_radii": 3.0,
        "seed": 2,
    },
    # desk-scale shrink of the full schedule (decay events scaled to match)
    "schedule": {
        "warmup_steps": 20_000,
        "joint_steps": 50_000,
        "lr_renderer": 5e-4,
        "lr_transition": 1e-3,
        "rays_per_batch": 512,
        "renderer_decay": [[1000, 0.5], [7500, 0.5], [15000, 0.5]],
        "transition_decay": [[1000, 0.5], [3000, 0.5], [5000, 0.5], [10000, 0.5], [30000, 0.5]],
        "warmup_exp_gamma": 0.1,
        "time_sampling": "uniform",
        "bptt_window": 0,
        "log_every": 25,
        "checkpoint_every": 0,
    },
}

# Named scene presets. `cube_ref` is the pinned desk-scale reference used by
# the acceptance suite: 512 particles, 64x64, 4 warm-up views, a compact
# field network, and a shortened observed horizon so pilots stay affordable.
PRESETS = {
    "water_cube": {},
    "water_sphere": {
        "fluid": {"initial_shape": "sphere", "shape_size": 0.28,
                  "shape_center": [0.0, 0.0, 0.6]},
    },
    "honey_cone": {
        "fluid": {"initial_shape": "cone", "material": "honey", "shape_size": 0.35,
                  "shape_height": 0.5, "shape_center": [0.0, 0.0, 0.45]},
    },
    "cube_ref": {
        "frames": 40,
        "observed": 30,
        "image_set": "minimal",
        "renderer": {"depth": 4, "width": 96, "skip_at": 2, "color_hidden": 48,
                     "n_coarse": 32, "n_fine": 48, "rays_per_batch": 1024,
                     "reference_samples": 128},
        "schedule": {"warmup_steps": 800, "joint_steps": 500,
                     "rays_per_batch": 256, "lr_transition": 2e-3,
                     "renderer_decay": [], "transition_decay": [[300, 0.5]],
                     "log_every": 50},
    },
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value, here)
        else:
            out[key] = copy.deepcopy(value)
    return out


def validate(data: Any, schema: Any = None, path: str = "") -> Any:
    schema = SCHEMA if schema is None else schema
    if isinstance(schema, dict):
        if not isinstance(data, dict):
            raise ConfigError("expected a mapping", path or "<root>")
        out = {}
        for key, value in data.items():
            here = f"{path}.{key}" if path else key
            if key not in schema:
                raise ConfigError("unknown configuration key", here)
            out[key] = validate(value, schema[key], here)
        return out
    return schema(data, path)


def resolve(raw: Optional[dict] = None, seed: Optional[int] = None) -> "SceneConfig":
    """Validate, apply the named preset, fill defaults, and bind types."""
    raw = dict(raw or {})
    validate(raw)
    preset_name = raw.pop("preset", None)
    merged = DEFAULTS
    if preset_name is not None:
        if preset_name not in PRESETS:
            raise ConfigError(f"unknown preset {preset_name!r}; choose from {sorted(PRESETS)}",
                              "preset")
        merged = _merge(merged, PRESETS[preset_name])
    merged = _merge(merged, raw)
    if seed is not None:
        merged["seed"] = seed
    cfg = SceneConfig(merged, preset_name)
    cfg.fluid_preset()   # fail fast on inconsistent geometry
    return cfg


def load_config_file(path: str, seed: Optional[int] = None) -> "SceneConfig":
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return resolve(raw, seed=seed)


class SceneConfig:
    """Fully resolved configuration with typed accessors."""

    def __init__(self, tree: dict, preset_name: Optional[str] = None):
        self.tree = tree
        self.preset_name = preset_name

    def echo(self) -> dict:
        out = copy.deepcopy(self.tree)
        if self.preset_name:
            out["preset"] = self.preset_name
        return out

    @property
    def seed(self) -> int:
        return self.tree["seed"]

    @property
    def resolution(self) -> int:
        return self.tree["resolution"]

    @property
    def observed(self) -> int:
        return self.tree["observed"]

    @property
    def distance_mode(self) -> str:
        return self.tree["distance_mode"]

    def fluid_preset(self) -> FluidPreset:
        f = dict(self.tree["fluid"])
        material = f.pop("material")
        for key, value in MATERIALS[material].items():
            f.setdefault(key, value)
        bounds = f.pop("box")
        return FluidPreset(
            box=Box(np.array(bounds[:3]), np.array(bounds[3:])),
            steps=self.tree["frames"],
            seed=self.seed,
            **f,
        )

    def camera_rig(self) -> CameraRig:
        c = self.tree["cameras"]
        return build_camera_rig(self.fluid_preset().box, self.resolution, **c)

    def appearance(self) -> AppearanceModel:
        return AppearanceModel(**self.tree["appearance"])

    def encoding_config(self) -> EncodingConfig:
        return EncodingConfig(**self.tree["encoding"])

    def field_net_config(self) -> FieldNetConfig:
        r = self.tree["renderer"]
        return FieldNetConfig(depth=r["depth"], width=r["width"], skip_at=r["skip_at"],
                              color_hidden=r["color_hidden"], seed=r["seed"])

    def render_config(self) -> RenderConfig:
        r = self.tree["renderer"]
        return RenderConfig(n_coarse=r["n_coarse"], n_fine=r["n_fine"],
                            rays_per_batch=r["rays_per_batch"],
                            background=np.array(self.tree["appearance"]["background"]))

    def transition_config(self) -> TransitionConfig:
        return TransitionConfig(**self.tree["transition"])

    def schedule(self) -> TrainSchedule:
        s = dict(self.tree["schedule"])
        s["renderer_decay"] = [tuple(e) for e in s["renderer_decay"]]
        s["transition_decay"] = [tuple(e) for e in s["transition_decay"]]
        return TrainSchedule(seed=self.seed, **s)


def schema_reference() -> str:
    """Generated reference page: every key with its default."""
    lines = ["Configuration reference (JSON). Unknown keys are rejected.", ""]
    lines.append("preset: optional name, one of " + ", ".join(sorted(PRESETS)))

    def walk(schema, defaults, prefix):
        for key in schema:
            if isinstance(schema[key], dict):
                walk(schema[key], defaults.get(key, {}), f"{prefix}{key}.")
            elif key in defaults:
                lines.append(f"{prefix}{key} = {json.dumps(defaults[key])}")
            elif prefix == "" and key == "preset":
                continue
            else:
                lines.append(f"{prefix}{key} (no default)")

    walk({k: v for k, v in SCHEMA.items() if k != "preset"}, DEFAULTS, "")
    return "\n".join(lines) + "\n"
