"""Particle state containers, pinhole cameras, spatial-hash ball query, and
the particle-set distance metric."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, DimensionError

# search radius is tied to the particle radius throughout the pipeline
SEARCH_RADIUS_FACTOR = 9.0


@dataclass
class Box:
    """Axis-aligned bounds in meters."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        if self.lo.shape != (3,) or self.hi.shape != (3,):
            raise ConfigError("box bounds must be 3-vectors")
        if np.any(self.hi <= self.lo):
            raise ConfigError("box upper bound must exceed lower bound on every axis")

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def extent(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.extent))

    def contains(self, points: np.ndarray, slack: float = 0.0) -> np.ndarray:
        p = np.atleast_2d(points)
        return np.all((p >= self.lo - slack) & (p <= self.hi + slack), axis=1)

    def normalize(self, points: np.ndarray) -> np.ndarray:
        """Map box coordinates to [-1, 1]^3 (sinusoids alias outside)."""
        return (np.asarray(points) - self.center) * (2.0 / self.extent)

    def inflated(self, fraction: float) -> "Box":
        pad = 0.5 * fraction * self.extent
        return Box(self.lo - pad, self.hi + pad)

    def as_list(self) -> list:
        return [float(v) for v in np.concatenate([self.lo, self.hi])]


class ParticleState:
    """Fluid particle positions/velocities plus static boundary samples.

    Boundary particles are immutable across time steps; simulation code keeps
    passing the same array through.
    """

    def __init__(self, positions, velocities, particle_radius: float,
                 boundary_positions=None):
        self.positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        self.velocities = np.asarray(velocities, dtype=np.float64).reshape(-1, 3)
        self.particle_radius = float(particle_radius)
        if boundary_positions is None:
            boundary_positions = np.zeros((0, 3))
        self.boundary_positions = np.asarray(boundary_positions, dtype=np.float64).reshape(-1, 3)
        if self.positions.shape[0] < 1:
            raise ConfigError("particle state needs at least one fluid particle")
        if self.positions.shape != self.velocities.shape:
            raise DimensionError("positions and velocities disagree",
                                 expected=self.positions.shape, got=self.velocities.shape)
        if self.particle_radius <= 0:
            raise ConfigError("particle radius must be positive")
        if not np.all(np.isfinite(self.positions)):
            raise ConfigError("fluid positions must be finite")

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def n_boundary(self) -> int:
        return self.boundary_positions.shape[0]

    @property
    def search_radius(self) -> float:
        return SEARCH_RADIUS_FACTOR * self.particle_radius

    def copy(self) -> "ParticleState":
        return ParticleState(self.positions.copy(), self.velocities.copy(),
                             self.particle_radius, self.boundary_positions)


# -- cameras ------------------------------------------------------------------

class Camera:
    """Pinhole camera.

    Camera frame: +x right, +y down (image rows grow downward), +z forward.
    `rotation` columns are those axes expressed in world coordinates.
    """

    def __init__(self, origin, rotation, focal: float, width: int, height: int):
        self.origin = np.asarray(origin, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(rotation, dtype=np.float64).reshape(3, 3)
        self.focal = float(focal)
        self.width = int(width)
        self.height = int(height)
        if self.focal <= 0:
            raise ConfigError("focal length must be positive")
        if not np.allclose(self.rotation @ self.rotation.T, np.eye(3), atol=1e-9):
            raise ConfigError("camera rotation must be orthonormal (1e-9)")

    @classmethod
    def look_at(cls, origin, target, focal: float, width: int, height: int,
                up=(0.0, 0.0, 1.0)) -> "Camera":
        origin = np.asarray(origin, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - origin
        norm = np.linalg.norm(forward)
        if norm < 1e-12:
            raise ConfigError("camera target coincides with origin")
        forward = forward / norm
        up = np.asarray(up, dtype=np.float64)
        right = np.cross(forward, up)
        rn = np.linalg.norm(right)
        if rn < 1e-9:
            right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
            rn = np.linalg.norm(right)
        right = right / rn
        down = np.cross(forward, right)
        rotation = np.stack([right, down, forward], axis=1)
        return cls(origin, rotation, focal, width, height)

    def pixel_directions(self, pixels: np.ndarray) -> np.ndarray:
        """Unit world-space directions through the centers of (u, v) pixels."""
        pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
        x = (pixels[:, 0] + 0.5 - 0.5 * self.width) / self.focal
        y = (pixels[:, 1] + 0.5 - 0.5 * self.height) / self.focal
        cam_dirs = np.stack([x, y, np.ones_like(x)], axis=1)
        world = cam_dirs @ self.rotation.T
        return world / np.linalg.norm(world, axis=1, keepdims=True)

    def all_pixels(self) -> np.ndarray:
        u, v = np.meshgrid(np.arange(self.width), np.arange(self.height))
        return np.stack([u.ravel(), v.ravel()], axis=1)

    def to_dict(self) -> dict:
        return {
            "origin": [float(v) for v in self.origin],
            "rotation": [[float(v) for v in row] for row in self.rotation],
            "focal": self.focal,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(d["origin"], d["rotation"], d["focal"], d["width"], d["height"])


def generate_rays(camera: Camera, pixel) -> tuple:
    """Ray (origin, unit direction) through one pixel center."""
    u, v = pixel
    if not (0 <= u < camera.width and 0 <= v < camera.height):
        raise ConfigError(f"pixel {pixel} outside {camera.width}x{camera.height} image")
    direction = camera.pixel_directions(np.array([[u, v]]))[0]
    return camera.origin.copy(), direction


# -- spatial hash and ball query ----------------------------------------------

@dataclass
class NeighborSet:
    """Result of a ball query: particle indices, local vectors, kernel weights."""

    indices: np.ndarray
    local: np.ndarray        # p_i - x, one row per neighbor
    weights: np.ndarray
    k: int = field(init=False)

    def __post_init__(self):
        self.k = int(len(self.indices))


def neighbor_weight(local, r_s: float) -> np.ndarray:
    """Kernel max(1 - (|l| / r_s)^3, 0); 1 at the center, 0 at the support edge."""
    if r_s <= 0:
        raise ConfigError("search radius must be positive")
    dist = np.linalg.norm(np.atleast_2d(local), axis=-1)
    w = np.maximum(1.0 - (dist / r_s) ** 3, 0.0)
    return w if w.size > 1 else w.reshape(())


class SpatialHash:
    """Uniform grid with cell size equal to the query radius.

    Immutable after build; a query only has to inspect the 27 cells around
    the query point's cell.
    """

    def __init__(self, positions: np.ndarray, cell_size: float):
        if cell_size <= 0:
            raise ConfigError("cell size must be positive")
        self.positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        self.cell_size = float(cell_size)
        cells = np.floor(self.positions / self.cell_size).astype(np.int64)
        self._cells: dict = {}
        for i, key in enumerate(map(tuple, cells)):
            self._cells.setdefault(key, []).append(i)
        self._cells = {k: np.asarray(v, dtype=np.int64) for k, v in self._cells.items()}

    def candidates(self, cell_key: tuple) -> np.ndarray:
        found = []
        cx, cy, cz = cell_key
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    hit = self._cells.get((cx + dx, cy + dy, cz + dz))
                    if hit is not None:
                        found.append(hit)
        if not found:
            return np.empty(0, dtype=np.int64)
        return np.concatenate(found)

    def query_pairs(self, points: np.ndarray, radius: float):
        """Batched ball query.

        Returns (sample_ids, particle_ids, local) sorted by (sample, particle)
        so downstream accumulation order is deterministic. Membership is the
        strict inequality |p - x| < radius.
        """
        if abs(radius - self.cell_size) > 1e-12 * max(1.0, self.cell_size):
            raise ConfigError(f"query radius {radius} must equal hash cell size {self.cell_size}")
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        q_cells = np.floor(points / self.cell_size).astype(np.int64)
        order = {}
        for qi, key in enumerate(map(tuple, q_cells)):
            order.setdefault(key, []).append(qi)

        r2 = radius * radius
        sid_parts, pid_parts = [], []
        for key, q_idx in order.items():
            cand = self.candidates(key)
            if cand.size == 0:
                continue
            q_idx = np.asarray(q_idx, dtype=np.int64)
            diff = self.positions[cand][None, :, :] - points[q_idx][:, None, :]
            inside = (diff * diff).sum(axis=2) < r2
            qi_local, ci_local = np.nonzero(inside)
            if qi_local.size:
                sid_parts.append(q_idx[qi_local])
                pid_parts.append(cand[ci_local])
        if not sid_parts:
            empty = np.empty(0, dtype=np.int64)
            return empty, empty, np.empty((0, 3))
        sids = np.concatenate(sid_parts)
        pids = np.concatenate(pid_parts)
        order = np.lexsort((pids, sids))
        sids, pids = sids[order], pids[order]
        local = self.positions[pids] - points[sids]
        return sids, pids, local


def ball_query(hash_grid: SpatialHash, x, r_s: float) -> NeighborSet:
    """All particles strictly within r_s of x, with local vectors and weights."""
    x = np.asarray(x, dtype=np.float64).reshape(1, 3)
    _, pids, local = hash_grid.query_pairs(x, r_s)
    return NeighborSet(indices=pids, local=local, weights=np.atleast_1d(neighbor_weight(local, r_s)) if len(pids) else np.empty(0))


def brute_force_query(positions: np.ndarray, x, r_s: float) -> np.ndarray:
    """O(N) reference scan returning the sorted index set within r_s."""
    diff = np.asarray(positions) - np.asarray(x).reshape(1, 3)
    inside = (diff * diff).sum(axis=1) < r_s * r_s
    return np.nonzero(inside)[0]


# -- particle distance metric ---------------------------------------------------

def particle_distance(estimated: np.ndarray, reference: np.ndarray,
                      mode: str = "nearest", block: int = 1024) -> float:
    """Distance between particle sets.

    mode "nearest" (default): mean over reference particles of the distance to
    the nearest estimated particle. mode "indexed": mean distance between
    identically indexed particles (sets must be the same size).
    """
    est = np.asarray(estimated, dtype=np.float64).reshape(-1, 3)
    ref = np.asarray(reference, dtype=np.float64).reshape(-1, 3)
    if est.shape[0] == 0 or ref.shape[0] == 0:
        raise ConfigError("particle_distance needs non-empty sets")
    if mode == "indexed":
        if est.shape != ref.shape:
            raise DimensionError("indexed distance needs equal-size sets",
                                 expected=ref.shape, got=est.shape)
        return float(np.linalg.norm(est - ref, axis=1).mean())
    if mode != "nearest":
        raise ConfigError(f"unknown particle distance mode {mode!r}")
    mins = np.empty(ref.shape[0])
    for start in range(0, ref.shape[0], block):
        chunk = ref[start:start + block]
        d2 = ((chunk[:, None, :] - est[None, :, :]) ** 2).sum(axis=2)
        mins[start:start + block] = np.sqrt(d2.min(axis=1))
    return float(mins.mean())
