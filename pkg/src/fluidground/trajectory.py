"""Binary trajectory sequences and a textual frame-dump mode.

File layout (little-endian):
    magic b"FGTR" | u32 version | u32 N | u32 M | u32 T | f32 r_p |
    6 x f32 box bounds (lo, hi) | boundary M x 3 f32 |
    T frames of (N x 3 positions, N x 3 velocities) f32
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointFormatError
from .geometry import Box, ParticleState

MAGIC = b"FGTR"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIf6f")


@dataclass
class Trajectory:
    """In-memory particle sequence: frames[t] holds (positions, velocities)."""

    positions: np.ndarray      # [T, N, 3] float32
    velocities: np.ndarray     # [T, N, 3] float32
    boundary: np.ndarray       # [M, 3] float32
    particle_radius: float
    box: Box

    @property
    def n_frames(self) -> int:
        return self.positions.shape[0]

    @property
    def n_particles(self) -> int:
        return self.positions.shape[1]

    def state_at(self, t: int) -> ParticleState:
        return ParticleState(
            self.positions[t].astype(np.float64),
            self.velocities[t].astype(np.float64),
            self.particle_radius,
            self.boundary.astype(np.float64),
        )


def save_trajectory(path: str, traj: Trajectory) -> None:
    pos = np.ascontiguousarray(traj.positions, dtype="<f4")
    vel = np.ascontiguousarray(traj.velocities, dtype="<f4")
    bnd = np.ascontiguousarray(traj.boundary, dtype="<f4").reshape(-1, 3)
    t, n, _ = pos.shape
    header = _HEADER.pack(MAGIC, VERSION, n, bnd.shape[0], t,
                          np.float32(traj.particle_radius), *[np.float32(v) for v in traj.box.as_list()])
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(bnd.tobytes(order="C"))
        for frame in range(t):
            fh.write(pos[frame].tobytes(order="C"))
            fh.write(vel[frame].tobytes(order="C"))


def load_trajectory(path: str) -> Trajectory:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size or raw[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: not a trajectory file")
    magic, version, n, m, t, r_p, *bounds = _HEADER.unpack_from(raw, 0)
    if version != VERSION:
        raise CheckpointFormatError(f"{path}: unsupported trajectory version {version}")
    offset = _HEADER.size
    expected = offset + 4 * 3 * (m + 2 * n * t)
    if len(raw) != expected:
        raise CheckpointFormatError(f"{path}: size {len(raw)} != expected {expected}")
    boundary = np.frombuffer(raw, dtype="<f4", count=3 * m, offset=offset).reshape(m, 3).copy()
    offset += 12 * m
    frames = np.frombuffer(raw, dtype="<f4", count=6 * n * t, offset=offset).reshape(t, 2, n, 3)
    return Trajectory(
        positions=frames[:, 0].copy(),
        velocities=frames[:, 1].copy(),
        boundary=boundary,
        particle_radius=float(np.float32(r_p)),
        box=Box(np.array(bounds[:3], dtype=np.float64), np.array(bounds[3:], dtype=np.float64)),
    )


def dump_frame_text(path: str, traj: Trajectory, frame: int) -> None:
    """Debug dump: one "x y z vx vy vz" line per particle."""
    pos = traj.positions[frame]
    vel = traj.velocities[frame]
    with open(path, "w") as fh:
        for p, v in zip(pos, vel):
            fh.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
