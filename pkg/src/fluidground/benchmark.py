"""Self-contained benchmark generation.

Couples the SPH oracle with a deterministic reference appearance model that
lies inside the learned renderer's representable family: density is
proportional to the soft particle density, color depends on the view through
the particle-relative direction. Observations rendered this way make the
inverse problem well-posed at desk scale.

Camera rig: a ring of `n_warmup + 1` cameras (the last one held out for
novel-view evaluation) plus one fixed training camera for the observed
sequence.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import version_string
from .autodiff import Tensor, no_grad
from .encoding import neighborhood_stats_np
from .errors import ConfigError
from .geometry import Box, Camera, ParticleState, SpatialHash
from .images import save_pfm, save_png
from .renderer import deltas_from_depths, ray_box_bounds, volume_render
from .sph import FluidPreset, simulate
from .trajectory import Trajectory, load_trajectory, save_trajectory

CAMERA_ROLES = ("warmup", "heldout", "train")


@dataclass
class AppearanceModel:
    """Analytic fields: sigma = density_gain * sigma_p,
    color = base_color * (1 - view_tint_gain * max(0, d . d_c))."""

    density_gain: float = 0.3
    base_color: np.ndarray = field(default_factory=lambda: np.array([0.25, 0.5, 0.85]))
    view_tint_gain: float = 0.3
    background: np.ndarray = field(default_factory=lambda: np.array([1.0, 1.0, 1.0]))

    def __post_init__(self):
        self.base_color = np.asarray(self.base_color, dtype=np.float64).reshape(3)
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)
        for name, col in (("base_color", self.base_color), ("background", self.background)):
            if np.any(col < 0) or np.any(col > 1):
                raise ConfigError(f"appearance {name} must lie in [0, 1]^3")
        if self.density_gain < 0:
            raise ConfigError("density gain must be non-negative")

    def to_dict(self) -> dict:
        return {
            "density_gain": self.density_gain,
            "base_color": [float(v) for v in self.base_color],
            "view_tint_gain": self.view_tint_gain,
            "background": [float(v) for v in self.background],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AppearanceModel":
        return cls(**d)


@dataclass
class CameraRig:
    """Named cameras with their roles in the protocol."""

    cameras: dict
    roles: dict

    def by_role(self, role: str) -> list:
        return [name for name, r in self.roles.items() if r == role]

    def to_dict(self) -> dict:
        return {name: {"role": self.roles[name], **cam.to_dict()}
                for name, cam in self.cameras.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraRig":
        cams, roles = {}, {}
        for name, entry in d.items():
            roles[name] = entry["role"]
            cams[name] = Camera.from_dict({k: v for k, v in entry.items() if k != "role"})
        return cls(cams, roles)


def build_camera_rig(box: Box, resolution: int, n_warmup: int = 4,
                     ring_radius: float = 2.0, ring_z: float = 1.05,
                     focal_factor: float = 1.2, train_azimuth_deg: float = 36.0) -> CameraRig:
    if n_warmup < 1:
        raise ConfigError("need at least one warm-up view")
    target = box.center
    focal = focal_factor * resolution
    cams, roles = {}, {}
    n_ring = n_warmup + 1
    for i in range(n_ring):
        az = 2.0 * math.pi * i / n_ring
        origin = target + np.array([ring_radius * math.cos(az),
                                    ring_radius * math.sin(az),
                                    ring_z - target[2]])
        name = f"cam{i:02d}"
        cams[name] = Camera.look_at(origin, target, focal, resolution, resolution)
        roles[name] = "warmup" if i < n_warmup else "heldout"
    az = math.radians(train_azimuth_deg)
    origin = target + np.array([ring_radius * math.cos(az),
                                ring_radius * math.sin(az),
                                ring_z - target[2]])
    cams["train"] = Camera.look_at(origin, target, focal, resolution, resolution)
    roles["train"] = "train"
    return CameraRig(cams, roles)


# -- analytic reference rendering ------------------------------------------------

def render_reference(state: ParticleState, camera: Camera, appearance: AppearanceModel,
                     n_samples: int = 160, box: Optional[Box] = None,
                     grid: Optional[SpatialHash] = None, chunk: int = 4096) -> np.ndarray:
    """Deterministic reference image via the shared volume integrator.

    Midpoint sampling between the per-ray box bounds; the analytic fields are
    evaluated in plain numpy and pushed through `volume_render`.
    """
    box = box or _bounding_box(state)
    r_s = state.search_radius
    grid = grid or SpatialHash(state.positions, r_s)
    dirs = camera.pixel_directions(camera.all_pixels())
    n = dirs.shape[0]
    image = np.empty((n, 3))
    origins = np.broadcast_to(camera.origin, (n, 3))
    near, far, hit = ray_box_bounds(origins, dirs, box)
    image[~hit] = appearance.background

    hit_idx = np.nonzero(hit)[0]
    with no_grad():
        for start in range(0, hit_idx.shape[0], chunk):
            rows = hit_idx[start:start + chunk]
            image[rows] = _render_reference_rows(
                state, camera, appearance, grid, r_s, dirs[rows],
                near[rows], far[rows], n_samples)
    return image.reshape(camera.height, camera.width, 3)


def _render_reference_rows(state, camera, appearance, grid, r_s, dirs, near, far, n_samples):
    rh = dirs.shape[0]
    steps = (np.arange(n_samples) + 0.5) / n_samples
    depths = near[:, None] + (far - near)[:, None] * steps[None, :]
    pts = camera.origin[None, None, :] + dirs[:, None, :] * depths[..., None]
    flat = pts.reshape(-1, 3)
    sid, pid, _ = grid.query_pairs(flat, r_s)
    stats = neighborhood_stats_np(flat, np.repeat(dirs, n_samples, axis=0),
                                  camera.origin, grid.positions, (sid, pid), r_s)
    sigma = appearance.density_gain * stats["sigma_p"]
    facing = np.maximum((np.repeat(dirs, n_samples, axis=0) * stats["d_c"]).sum(axis=1), 0.0)
    color = appearance.base_color[None, :] * (1.0 - appearance.view_tint_gain * facing[:, None])
    rgb, _, _ = volume_render(Tensor(sigma.reshape(rh, n_samples)),
                              Tensor(color.reshape(rh, n_samples, 3)),
                              deltas_from_depths(depths, far), appearance.background)
    return rgb.data


def _bounding_box(state: ParticleState) -> Box:
    pts = np.concatenate([state.positions, state.boundary_positions]) \
        if state.boundary_positions.size else state.positions
    return Box(pts.min(axis=0) - 0.1, pts.max(axis=0) + 0.1)


# -- benchmark generation -----------------------------------------------------------

@dataclass
class Benchmark:
    """In-memory view of a generated benchmark directory."""

    directory: str
    manifest: dict
    trajectory: Trajectory
    rig: CameraRig
    appearance: AppearanceModel
    preset: FluidPreset

    @property
    def n_observed(self) -> int:
        return int(self.manifest["split"]["observed"])

    @property
    def n_frames(self) -> int:
        return int(self.manifest["frames"])

    def image_path(self, frame: int, cam: str) -> str:
        key = f"{frame:03d}/{cam}"
        entry = self.manifest["images"].get(key)
        if entry is None:
            raise ConfigError(f"benchmark has no image for frame {frame}, camera {cam}")
        return os.path.join(self.directory, entry)


def generate_benchmark(preset: FluidPreset, rig: CameraRig, appearance: AppearanceModel,
                       out_dir: str, observed: Optional[int] = None,
                       image_set: str = "full", write_pfm: bool = False,
                       reference_samples: int = 160,
                       config_echo: Optional[dict] = None) -> Benchmark:
    """Simulate, render, and write trajectory + images + manifest.

    `observed` marks the training split (remaining frames are held out for
    prediction evaluation). image_set "full" renders every (frame, camera)
    pair; "minimal" renders warm-up cameras at frame 0 only, which is all the
    training protocol consumes.
    """
    if image_set not in ("full", "minimal"):
        raise ConfigError(f"image_set must be 'full' or 'minimal', got {image_set!r}")
    observed = preset.steps - 10 if observed is None else observed
    if not (0 < observed <= preset.steps):
        raise ConfigError(f"observed split {observed} outside 1..{preset.steps}")
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)

    traj = simulate(preset)
    traj_path = os.path.join(out_dir, "trajectory.fgtr")
    save_trajectory(traj_path, traj)

    images = {}
    for frame in range(preset.steps):
        state = traj.state_at(frame)
        grid = SpatialHash(state.positions, state.search_radius)
        for name, cam in rig.cameras.items():
            if image_set == "minimal" and rig.roles[name] == "warmup" and frame > 0:
                continue
            img = render_reference(state, cam, appearance, n_samples=reference_samples,
                                   box=preset.box, grid=grid)
            rel = f"images/f{frame:03d}_{name}.png"
            save_png(os.path.join(out_dir, rel), img)
            if write_pfm:
                save_pfm(os.path.join(out_dir, rel[:-4] + ".pfm"), img.astype(np.float32))
            images[f"{frame:03d}/{name}"] = rel

    manifest = {
        "version": version_string(),
        "kind": "fluidground-benchmark",
        "preset": _preset_to_dict(preset),
        "appearance": appearance.to_dict(),
        "cameras": rig.to_dict(),
        "trajectory": "trajectory.fgtr",
        "frames": preset.steps,
        "split": {"observed": observed, "future": preset.steps - observed},
        "image_set": image_set,
        "reference_samples": reference_samples,
        "images": images,
    }
    if config_echo is not None:
        manifest["config"] = config_echo
    manifest_path = os.path.join(out_dir, "manifest.json")
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return Benchmark(out_dir, manifest, traj, rig, appearance, preset)


def load_benchmark(directory: str) -> Benchmark:
    manifest_path = os.path.join(directory, "manifest.json")
    if not os.path.exists(manifest_path):
        raise ConfigError(f"{directory}: no manifest.json (not a benchmark directory)")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    traj = load_trajectory(os.path.join(directory, manifest["trajectory"]))
    rig = CameraRig.from_dict(manifest["cameras"])
    appearance = AppearanceModel.from_dict(manifest["appearance"])
    preset = _preset_from_dict(manifest["preset"])
    return Benchmark(directory, manifest, traj, rig, appearance, preset)


def _preset_to_dict(preset: FluidPreset) -> dict:
    return {
        "initial_shape": preset.initial_shape,
        "viscosity": preset.viscosity,
        "rest_density": preset.rest_density,
        "particle_radius": preset.particle_radius,
        "box": preset.box.as_list(),
        "gravity": [float(v) for v in preset.gravity],
        "dt": preset.dt,
        "steps": preset.steps,
        "substeps": preset.substeps,
        "shape_center": [float(v) for v in preset.shape_center],
        "shape_size": preset.shape_size,
        "shape_height": preset.shape_height,
        "sound_speed": preset.sound_speed,
        "wall_stiffness": preset.wall_stiffness,
        "wall_damping": preset.wall_damping,
        "jitter": preset.jitter,
        "seed": preset.seed,
    }


def _preset_from_dict(d: dict) -> FluidPreset:
    d = dict(d)
    bounds = d.pop("box")
    return FluidPreset(box=Box(np.array(bounds[:3]), np.array(bounds[3:])), **d)
