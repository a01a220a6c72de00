"""Learnable particle transition model.

One step: ballistic advection (symplectic Euler, no interactions), then a
continuous-convolution correction

    dx_i = scale * MLP_out( sum_{j in N(i)} a(|x_j - x_i|) * (K(x_j - x_i) (*) E f_j) )

with window a(r) = (1 - (r/R)^2)^3 for r < R, kernel network K mapping the
relative displacement to per-channel weights, and embedded neighbor features
f_j = (1, v_j, is_boundary). Velocities come from the position difference,
so the state stays self-consistent with what rendering can supervise.

The output layer starts at zero, so an untrained model is exactly ballistic
advection; joint training therefore starts from physically plausible motion.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import (AdamState, Linear, Tensor, adam_step, concat, no_grad,
                       zero_grads)
from .errors import ConfigError, RolloutDivergedError
from .geometry import Box, ParticleState, SpatialHash
from .trajectory import Trajectory

WINDOW_RADIUS_FACTOR = 4.5   # correction neighborhood, in particle radii
N_FEATURES = 5               # (1, vx, vy, vz, is_boundary)


@dataclass
class TransitionConfig:
    channels: int = 16
    kernel_hidden: int = 32
    out_hidden: int = 32
    correction_scale: float = 1.0   # in particle radii per step
    clamp_radii: float = 3.0        # max |dx| in particle radii
    seed: int = 0

    def __post_init__(self):
        if self.channels < 1 or self.kernel_hidden < 1 or self.out_hidden < 1:
            raise ConfigError("network widths must be positive")
        if self.clamp_radii <= 0:
            raise ConfigError("stability clamp must be positive")


@dataclass
class TensorState:
    """Particle state living on the autodiff tape during a rollout."""

    positions: Tensor
    velocities: Tensor
    boundary: np.ndarray
    particle_radius: float

    @classmethod
    def from_state(cls, state: ParticleState) -> "TensorState":
        return cls(Tensor(state.positions), Tensor(state.velocities),
                   state.boundary_positions, state.particle_radius)

    def to_state(self) -> ParticleState:
        return ParticleState(self.positions.data.copy(), self.velocities.data.copy(),
                             self.particle_radius, self.boundary)


class TransitionModel:
    """Continuous-convolution transition network T(state) -> next state."""

    def __init__(self, cfg: TransitionConfig, gravity, dt: float,
                 particle_radius: float, box: Box):
        self.cfg = cfg
        self.gravity = np.asarray(gravity, dtype=np.float64).reshape(3)
        self.dt = float(dt)
        self.particle_radius = float(particle_radius)
        self.box = box
        self.window_radius = WINDOW_RADIUS_FACTOR * particle_radius
        self.clamp_count = 0
        rng = np.random.default_rng(cfg.seed)
        c = cfg.channels
        self.feat_embed = Linear(N_FEATURES, c, rng, "transition/feat")
        self.kernel0 = Linear(3, cfg.kernel_hidden, rng, "transition/kernel0")
        self.kernel1 = Linear(cfg.kernel_hidden, c, rng, "transition/kernel1")
        self.out0 = Linear(c, cfg.out_hidden, rng, "transition/out0")
        self.out1 = Linear(cfg.out_hidden, 3, rng, "transition/out1", zero=True)

    def parameters(self) -> list:
        params = []
        for layer in (self.feat_embed, self.kernel0, self.kernel1, self.out0, self.out1):
            params.extend(layer.parameters())
        return params

    # .........................................................................

    def advect(self, state: TensorState) -> TensorState:
        """Symplectic-Euler ballistic half of the step; no interactions."""
        g = Tensor(self.gravity[None, :])
        v_star = state.velocities + g * self.dt
        x_star = state.positions + v_star * self.dt
        return TensorState(x_star, v_star, state.boundary, state.particle_radius)

    def correction(self, inter: TensorState) -> Tensor:
        """Windowed continuous-convolution displacement for each fluid particle.

        The neighbor set comes from a spatial hash over the detached
        intermediate positions; gradients flow through displacements and
        features of the returned neighbors only.
        """
        x_np = inter.positions.data
        n = x_np.shape[0]
        all_np = np.concatenate([x_np, inter.boundary], axis=0) if inter.boundary.size else x_np
        grid = SpatialHash(all_np, self.window_radius)
        sid, pid, _ = grid.query_pairs(x_np, self.window_radius)
        keep = sid != pid
        sid, pid = sid[keep], pid[keep]

        m = inter.boundary.shape[0]
        all_pos = concat([inter.positions, Tensor(inter.boundary)], axis=0) \
            if m else inter.positions
        zeros_b = Tensor(np.zeros((m, 3)))
        all_vel = concat([inter.velocities, zeros_b], axis=0) if m else inter.velocities

        rel = all_pos.gather_rows(pid) - inter.positions.gather_rows(sid)
        r2 = (rel * rel).sum(axis=-1)
        window = (1.0 - r2 * (1.0 / self.window_radius ** 2)).maximum(0.0) ** 3

        is_b = (pid >= n).astype(np.float64)[:, None]
        feats = concat([Tensor(np.ones((sid.shape[0], 1))),
                        all_vel.gather_rows(pid),
                        Tensor(is_b)], axis=-1)
        embedded = self.feat_embed(feats)
        kernel = self.kernel1(self.kernel0(rel * (1.0 / self.window_radius)).relu())
        message = window.reshape((-1, 1)) * kernel * embedded
        agg = message.segment_sum(sid, n)
        raw = self.out1(self.out0(agg).relu())
        dx = raw * (self.cfg.correction_scale * self.particle_radius)
        return self._clamp(dx)

    def _clamp(self, dx: Tensor) -> Tensor:
        """Scale down corrections beyond the stability bound; counts events."""
        limit = self.cfg.clamp_radii * self.particle_radius
        norm = (dx * dx).sum(axis=-1).sqrt()
        over = norm.data > limit
        if over.any():
            self.clamp_count += int(over.sum())
            scale = (limit / norm.maximum(limit)).reshape((-1, 1))
            dx = dx * scale
        return dx

    def step(self, state: TensorState) -> TensorState:
        """x_{t+1} = advect(x_t) + dx;  v_{t+1} = (x_{t+1} - x_t) / dt."""
        inter = self.advect(state)
        dx = self.correction(inter)
        x_next = inter.positions + dx
        v_next = (x_next - state.positions) * (1.0 / self.dt)
        return TensorState(x_next, v_next, state.boundary, state.particle_radius)

    def rollout(self, initial: ParticleState, n_steps: int) -> list:
        """Iterate `step`; returns n_steps + 1 TensorStates including the start."""
        if n_steps < 1:
            raise ConfigError("rollout needs n_steps >= 1")
        limit = 10.0 * self.box.diagonal
        states = [TensorState.from_state(initial)]
        for k in range(n_steps):
            nxt = self.step(states[-1])
            if not np.all(np.isfinite(nxt.positions.data)) or \
                    np.abs(nxt.positions.data).max() > limit:
                raise RolloutDivergedError(
                    f"positions left the sanity envelope (|x| > {limit:.3g})", step=k + 1)
            states.append(nxt)
        return states

    def rollout_positions(self, initial: ParticleState, n_steps: int) -> np.ndarray:
        """Gradient-free rollout returning [n_steps + 1, N, 3] positions."""
        with no_grad():
            states = self.rollout(initial, n_steps)
            return np.stack([s.positions.data for s in states], axis=0)


def pretrain_on_oracle(model: TransitionModel, traj: Trajectory, epochs: int,
                       lr: float = 1e-3, seed: int = 0,
                       adam: Optional[AdamState] = None) -> list:
    """Supervised pre-training on an oracle trajectory (index-matched).

    Minimizes the mean per-particle position error of one- and two-step
    predictions from every observed frame. Returns the per-epoch loss history.
    """
    if traj.n_frames < 3:
        raise ConfigError("pretraining needs at least 3 frames")
    adam = adam or AdamState(lr=lr)
    params = model.parameters()
    rng = np.random.default_rng(seed)
    history = []
    starts = np.arange(traj.n_frames - 2)
    for _ in range(epochs):
        order = rng.permutation(starts)
        total = 0.0
        for t in order:
            state = TensorState.from_state(traj.state_at(int(t)))
            one = model.step(state)
            two = model.step(one)
            loss = _mean_distance(one.positions, traj.positions[t + 1]) + \
                _mean_distance(two.positions, traj.positions[t + 2])
            zero_grads(params)
            loss.backward()
            adam_step(adam, params, lr=lr)
            total += loss.item()
        history.append(total / len(order))
    return history


def _mean_distance(predicted: Tensor, target: np.ndarray) -> Tensor:
    diff = predicted - Tensor(np.asarray(target, dtype=np.float64))
    return (diff * diff).sum(axis=-1).sqrt().mean()
