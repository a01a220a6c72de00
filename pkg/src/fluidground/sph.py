"""Weakly-compressible SPH oracle.

Generates ground-truth particle trajectories on a desk scale: poly6 density
kernel, spiky pressure gradient, Tait equation of state (exponent 7), explicit
Laplacian viscosity, penalty-force walls, symplectic-Euler integration.

A preset's `dt` is the recorded frame interval; the integrator takes
`substeps` symplectic-Euler steps per frame because WCSPH is unstable at
frame-rate step sizes. `sph_step` performs exactly one such substep.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .autodiff import scatter_add_rows
from .errors import ConfigError, SimulationDivergedError
from .geometry import Box, ParticleState, SpatialHash
from .trajectory import Trajectory

SHAPES = ("cube", "sphere", "cone")

# material presets: kernel viscosity coefficient and rest density
MATERIALS = {
    "water": {"viscosity": 0.08, "rest_density": 1000.0},
    "honey": {"viscosity": 0.8, "rest_density": 1420.0},
}

# dimensionless preset viscosity -> SPH kinematic viscosity (m^2/s);
# chosen so the "water" preset stops sloshing within a 60-frame drop scene
VISCOSITY_SCALE = 0.25


@dataclass
class FluidPreset:
    """Scene recipe for the oracle simulator."""

    initial_shape: str = "cube"
    viscosity: float = 0.08
    rest_density: float = 1000.0
    particle_radius: float = 0.025
    box: Box = field(default_factory=lambda: Box(np.array([-0.5, -0.5, 0.0]), np.array([0.5, 0.5, 1.0])))
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))
    dt: float = 0.02
    steps: int = 60
    substeps: int = 40
    shape_center: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.65]))
    shape_size: float = 0.4           # cube side / sphere radius / cone base radius
    shape_height: float = 0.4         # cone only
    sound_speed: float = 20.0
    wall_stiffness: float = 5.0e4     # penalty spring, 1/s^2
    wall_damping: float = 200.0       # normal-velocity damping, 1/s
    jitter: float = 0.1               # lattice jitter in units of particle radius
    seed: int = 0

    def __post_init__(self):
        self.gravity = np.asarray(self.gravity, dtype=np.float64).reshape(3)
        self.shape_center = np.asarray(self.shape_center, dtype=np.float64).reshape(3)
        if self.initial_shape not in SHAPES:
            raise ConfigError(f"unknown initial shape {self.initial_shape!r}; choose from {SHAPES}")
        if self.viscosity < 0:
            raise ConfigError("viscosity must be >= 0")
        if self.rest_density <= 0 or self.particle_radius <= 0:
            raise ConfigError("rest density and particle radius must be positive")
        if self.dt <= 0 or self.steps < 1 or self.substeps < 1:
            raise ConfigError("dt, steps, and substeps must be positive")
        lo, hi = self._shape_bbox()
        inset = self.particle_radius
        if np.any(lo < self.box.lo + inset) or np.any(hi > self.box.hi - inset):
            raise ConfigError("initial shape does not fit inside the box")

    # SPH derived quantities -------------------------------------------------

    @property
    def spacing(self) -> float:
        return 2.0 * self.particle_radius

    @property
    def smoothing_length(self) -> float:
        return 4.0 * self.particle_radius

    @property
    def particle_mass(self) -> float:
        return self.rest_density * self.spacing ** 3

    @property
    def kinematic_viscosity(self) -> float:
        return self.viscosity * VISCOSITY_SCALE

    @property
    def tait_stiffness(self) -> float:
        return self.rest_density * self.sound_speed ** 2 / 7.0

    @property
    def sub_dt(self) -> float:
        return self.dt / self.substeps

    def _shape_bbox(self):
        c, s = self.shape_center, self.shape_size
        if self.initial_shape == "cube":
            return c - 0.5 * s, c + 0.5 * s
        if self.initial_shape == "sphere":
            return c - s, c + s
        lo = c - np.array([s, s, 0.0])
        hi = c + np.array([s, s, self.shape_height])
        return lo, hi

    def shape_contains(self, points: np.ndarray) -> np.ndarray:
        """Implicit inequality of the initial shape."""
        p = np.atleast_2d(points) - self.shape_center
        if self.initial_shape == "cube":
            return np.all(np.abs(p) <= 0.5 * self.shape_size + 1e-12, axis=1)
        if self.initial_shape == "sphere":
            return (p * p).sum(axis=1) <= self.shape_size ** 2 + 1e-12
        t = p[:, 2] / self.shape_height
        radial = np.linalg.norm(p[:, :2], axis=1)
        return (t >= -1e-12) & (t <= 1.0 + 1e-12) & (radial <= self.shape_size * (1.0 - t) + 1e-12)


def named_preset(shape: str, material: str, **overrides) -> FluidPreset:
    mat = MATERIALS.get(material)
    if mat is None:
        raise ConfigError(f"unknown material {material!r}; choose from {sorted(MATERIALS)}")
    base = FluidPreset(initial_shape=shape, viscosity=mat["viscosity"],
                       rest_density=mat["rest_density"])
    return replace(base, **overrides) if overrides else base


# -- seeding --------------------------------------------------------------------

def _lattice(lo: np.ndarray, hi: np.ndarray, spacing: float) -> np.ndarray:
    axes = []
    for a in range(3):
        count = max(int(math.floor((hi[a] - lo[a]) / spacing + 1e-9)), 1)
        axes.append(lo[a] + spacing * (0.5 + np.arange(count)))
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


def sample_boundary(box: Box, spacing: float) -> np.ndarray:
    """One layer of static particles on the box walls at the given spacing."""
    counts = np.maximum(np.round(box.extent / spacing).astype(int), 1)
    axes = [np.linspace(box.lo[a], box.hi[a], counts[a] + 1) for a in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    on_face = (np.isclose(pts, box.lo[None, :]) | np.isclose(pts, box.hi[None, :])).any(axis=1)
    return pts[on_face]


def seed_particles(preset: FluidPreset) -> ParticleState:
    """Jittered lattice at spacing 2 r_p filling the initial shape, at rest."""
    lo, hi = preset._shape_bbox()
    pts = _lattice(lo, hi, preset.spacing)
    pts = pts[preset.shape_contains(pts)]
    if pts.shape[0] == 0:
        raise ConfigError("initial shape too small for the particle lattice")
    rng = np.random.default_rng(preset.seed)
    if preset.jitter > 0:
        pts = pts + rng.uniform(-preset.jitter, preset.jitter, size=pts.shape) * preset.particle_radius
    boundary = sample_boundary(preset.box, preset.spacing)
    return ParticleState(pts, np.zeros_like(pts), preset.particle_radius, boundary)


# -- kernels ----------------------------------------------------------------------

def poly6(r2: np.ndarray, h: float) -> np.ndarray:
    coef = 315.0 / (64.0 * math.pi * h ** 9)
    diff = np.maximum(h * h - r2, 0.0)
    return coef * diff ** 3


def spiky_gradient(rel: np.ndarray, r: np.ndarray, h: float) -> np.ndarray:
    """Gradient of the spiky kernel wrt the first particle; antisymmetric."""
    coef = -45.0 / (math.pi * h ** 6)
    safe_r = np.maximum(r, 1e-9 * h)
    mag = coef * np.maximum(h - r, 0.0) ** 2 / safe_r
    mag = np.where(r < 1e-9 * h, 0.0, mag)
    return mag[:, None] * rel


def viscosity_laplacian(r: np.ndarray, h: float) -> np.ndarray:
    return 45.0 / (math.pi * h ** 6) * np.maximum(h - r, 0.0)


# -- dynamics ----------------------------------------------------------------------

def _fluid_pairs(state: ParticleState, h: float):
    """(i, j, rel, r) for fluid i against fluid+boundary j within h, i != j."""
    all_pos = np.concatenate([state.positions, state.boundary_positions], axis=0)
    grid = SpatialHash(all_pos, h)
    sid, pid, rel = grid.query_pairs(state.positions, h)
    keep = sid != pid  # self pairs carry no relative information
    sid, pid, rel = sid[keep], pid[keep], rel[keep]
    return sid, pid, -rel, np.linalg.norm(rel, axis=1)  # rel := x_i - x_j


def sph_accelerations(state: ParticleState, preset: FluidPreset):
    """Per-particle accelerations (pressure + viscosity + gravity + walls).

    Boundary particles contribute to density; their pressure mirrors the fluid
    particle's own and their velocity is zero (no-slip drag).
    """
    n = state.n
    h = preset.smoothing_length
    m = preset.particle_mass
    rho0 = preset.rest_density

    sid, pid, rel, r = _fluid_pairs(state, h)
    r2 = (rel * rel).sum(axis=1)

    rho = np.full(n, m * poly6(np.zeros(1), h)[0])  # self contribution
    rho += scatter_add_rows(m * poly6(r2, h), sid, (n,))
    rho_hat = np.maximum(rho, rho0)
    pressure = preset.tait_stiffness * ((rho_hat / rho0) ** 7 - 1.0)

    is_boundary = pid >= n
    pid_safe = np.minimum(pid, n - 1)  # boundary entries replaced below
    rho_j = np.where(is_boundary, rho0, rho[pid_safe])
    p_j = np.where(is_boundary, pressure[sid], pressure[pid_safe])

    grad = spiky_gradient(rel, r, h)
    coeff = m * (pressure[sid] / rho_hat[sid] ** 2 + p_j / np.maximum(rho_j, rho0) ** 2)
    accel = scatter_add_rows(-coeff[:, None] * grad, sid, (n, 3))

    if preset.kinematic_viscosity > 0:
        v_j = np.where(is_boundary[:, None], 0.0, state.velocities[pid_safe])
        dv = v_j - state.velocities[sid]
        visc = preset.kinematic_viscosity * (m / np.maximum(rho_j, rho0))[:, None] \
            * viscosity_laplacian(r, h)[:, None] * dv
        accel += scatter_add_rows(visc, sid, (n, 3))

    accel += preset.gravity[None, :]
    accel += _wall_penalty(state, preset)
    return accel, rho


def _wall_penalty(state: ParticleState, preset: FluidPreset) -> np.ndarray:
    """Spring-damper on walls inset by one particle radius."""
    x, v = state.positions, state.velocities
    lo = preset.box.lo + preset.particle_radius
    hi = preset.box.hi - preset.particle_radius
    low_depth = np.maximum(lo[None, :] - x, 0.0)
    high_depth = np.maximum(x - hi[None, :], 0.0)
    engaged = (low_depth > 0) | (high_depth > 0)
    return preset.wall_stiffness * (low_depth - high_depth) \
        - preset.wall_damping * np.where(engaged, v, 0.0)


def sph_step(state: ParticleState, preset: FluidPreset, dt: Optional[float] = None) -> ParticleState:
    """One symplectic-Euler substep (default size preset.dt / preset.substeps)."""
    dt = preset.sub_dt if dt is None else dt
    accel, _ = sph_accelerations(state, preset)
    v_next = state.velocities + dt * accel
    x_next = state.positions + dt * v_next
    # hard backstop: keep everything inside the box, kill outward velocity
    below = x_next < preset.box.lo[None, :]
    above = x_next > preset.box.hi[None, :]
    if below.any() or above.any():
        x_next = np.clip(x_next, preset.box.lo[None, :], preset.box.hi[None, :])
        v_next = np.where(below | above, 0.0, v_next)
    if not (np.all(np.isfinite(x_next)) and np.all(np.isfinite(v_next))):
        raise SimulationDivergedError(
            f"non-finite particle state (max |v| last step was {np.abs(state.velocities).max():.3g})")
    return ParticleState(x_next, v_next, state.particle_radius, state.boundary_positions)


def advance_frame(state: ParticleState, preset: FluidPreset) -> ParticleState:
    for _ in range(preset.substeps):
        state = sph_step(state, preset)
    return state


def kinetic_energy(state: ParticleState, preset: FluidPreset) -> float:
    return float(0.5 * preset.particle_mass * (state.velocities ** 2).sum())


def simulate(preset: FluidPreset, n_frames: Optional[int] = None,
             initial: Optional[ParticleState] = None) -> Trajectory:
    """Run the oracle and record `n_frames` frames (frame 0 is the seed state)."""
    n_frames = preset.steps if n_frames is None else n_frames
    state = seed_particles(preset) if initial is None else initial
    positions = np.empty((n_frames, state.n, 3), dtype=np.float32)
    velocities = np.empty_like(positions)
    positions[0] = state.positions
    velocities[0] = state.velocities
    for t in range(1, n_frames):
        try:
            state = advance_frame(state, preset)
        except SimulationDivergedError as exc:
            raise SimulationDivergedError(str(exc), step=t) from exc
        positions[t] = state.positions
        velocities[t] = state.velocities
    return Trajectory(positions=positions, velocities=velocities,
                      boundary=state.boundary_positions.astype(np.float32),
                      particle_radius=preset.particle_radius, box=preset.box)
