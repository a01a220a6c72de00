"""Neighborhood encodings conditioning the radiance field.

Each ray sample point x summarizes its ball-query neighborhood as
  - the fictitious center p_c = (1/K) sum_i w_i p_i (kept literally
    un-normalized; a weight-normalized variant is config-selectable),
  - the soft particle density sigma_p = sum_i w_i,
  - the deformation statistic v_D = (1/K) sum_i |l_i - mean(l)| (scalar mean
    deviation by default; per-axis vector variant available),
  - the particle-relative view direction d_c = (p_c - o) / |p_c - o|.

All four flow gradients back to particle positions. Sinusoidal features are
applied after normalizing scalars to roughly [-1, 1] (positions through the
scene box, sigma_p by a fixed cap, v_D by the search radius).

Empty neighborhoods use the convention sigma_p = 0, v_D = 0, p_c := x,
d_c := ray direction, keeping the field input finite so the network can learn
"vacuum" from sigma_p = 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import Tensor, concat, positional_encode, scatter_add_rows
from .errors import ConfigError
from .geometry import Box, NeighborSet

CENTER_MODES = ("verbatim", "normalized")
DEFORMATION_MODES = ("scalar", "vector")


@dataclass
class EncodingConfig:
    levels_x: int = 10
    levels_d: int = 4
    sigma_cap: float = 64.0
    center_mode: str = "verbatim"
    deformation_mode: str = "scalar"

    def __post_init__(self):
        if self.center_mode not in CENTER_MODES:
            raise ConfigError(f"center_mode must be one of {CENTER_MODES}")
        if self.deformation_mode not in DEFORMATION_MODES:
            raise ConfigError(f"deformation_mode must be one of {DEFORMATION_MODES}")
        if self.levels_x < 1 or self.levels_d < 1:
            raise ConfigError("encoding levels must be >= 1")

    @property
    def deformation_width(self) -> int:
        return 1 if self.deformation_mode == "scalar" else 3

    @property
    def e_x_width(self) -> int:
        return 2 * self.levels_x * (3 + 1 + self.deformation_width)

    @property
    def e_d_width(self) -> int:
        return 2 * self.levels_d * 3

    @property
    def point_width(self) -> int:
        """Width of the raw positional features for a 3-vector."""
        return 2 * self.levels_x * 3

    @property
    def dir_width(self) -> int:
        return 2 * self.levels_d * 3


@dataclass
class NeighborhoodEncoding:
    """Pre-encoding statistics plus the positional-encoded feature vectors."""

    p_c: np.ndarray
    sigma_p: float
    v_d: np.ndarray          # scalar stored as shape-() array, vector as (3,)
    d_c: np.ndarray
    e_x: np.ndarray
    e_d: np.ndarray
    k: int


# -- single-neighborhood operations (numpy) ------------------------------------

def fictitious_center(nbrs: NeighborSet, positions: np.ndarray,
                      mode: str = "verbatim") -> np.ndarray:
    """Weighted average neighbor position, divided by the COUNT K as written
    (so it shrinks toward the origin as weights decay); `normalized` divides
    by sum(w) instead."""
    if nbrs.k == 0:
        raise ConfigError("fictitious_center needs at least one neighbor")
    w = nbrs.weights
    p = positions[nbrs.indices]
    if mode == "normalized":
        return (w[:, None] * p).sum(axis=0) / max(w.sum(), 1e-12)
    return (w[:, None] * p).sum(axis=0) / nbrs.k


def sphere_density(nbrs: NeighborSet) -> float:
    return float(nbrs.weights.sum()) if nbrs.k else 0.0


def deformation(nbrs: NeighborSet, mode: str = "scalar") -> np.ndarray:
    """Mean deviation of local vectors from their mean."""
    if nbrs.k == 0:
        raise ConfigError("deformation needs at least one neighbor")
    dev = nbrs.local - nbrs.local.mean(axis=0, keepdims=True)
    if mode == "vector":
        return np.abs(dev).mean(axis=0)
    return np.asarray(np.linalg.norm(dev, axis=1).mean())


def particle_relative_direction(p_c: np.ndarray, origin: np.ndarray,
                                fallback: Optional[np.ndarray] = None) -> np.ndarray:
    rel = np.asarray(p_c, dtype=np.float64) - np.asarray(origin, dtype=np.float64)
    norm = np.linalg.norm(rel)
    if norm < 1e-12:
        if fallback is None:
            raise ConfigError("degenerate view direction: p_c coincides with the camera")
        return np.asarray(fallback, dtype=np.float64)
    return rel / norm


def encode_neighborhood(nbrs: NeighborSet, positions: np.ndarray, x: np.ndarray,
                        origin: np.ndarray, ray_dir: np.ndarray, box: Box,
                        r_s: float, cfg: Optional[EncodingConfig] = None) -> NeighborhoodEncoding:
    """Single-sample encoding; routed through the batched tape encoder so the
    two paths cannot drift apart."""
    cfg = cfg or EncodingConfig()
    x = np.asarray(x, dtype=np.float64).reshape(1, 3)
    sid = np.zeros(nbrs.k, dtype=np.int64)
    pos_t = Tensor(positions.reshape(-1, 3) if nbrs.k else np.zeros((1, 3)))
    pid = nbrs.indices if nbrs.k else np.zeros(0, dtype=np.int64)
    e_x, e_d, stats = encode_batch(
        pos_t, x, np.asarray(ray_dir, dtype=np.float64).reshape(1, 3),
        np.asarray(origin, dtype=np.float64), (sid, pid), box, r_s, cfg)
    return NeighborhoodEncoding(
        p_c=stats["p_c"].data[0],
        sigma_p=float(stats["sigma_p"].data[0]),
        v_d=np.squeeze(stats["v_d"].data[0]),
        d_c=stats["d_c"].data[0],
        e_x=e_x.data[0],
        e_d=e_d.data[0],
        k=nbrs.k,
    )


# -- batched tape encoder --------------------------------------------------------

def _safe_norm(t: Tensor, axis: int = -1) -> Tensor:
    return (t * t).sum(axis=axis).sqrt()


def _abs(t: Tensor) -> Tensor:
    return t.relu() + (-t).relu()


def encode_batch(positions: Tensor, sample_points: np.ndarray, ray_dirs: np.ndarray,
                 origin: np.ndarray, pairs, box: Box, r_s: float,
                 cfg: Optional[EncodingConfig] = None):
    """Encode S sample points against the particle tensor.

    pairs is (sample_ids, particle_ids) from a ball query over the SAME
    positions; membership is fixed (no gradient through the discrete set),
    while l_i and w_i stay differentiable.

    Returns (e_x [S, e_x_width], e_d [S, e_d_width], stats dict of tensors).
    """
    cfg = cfg or EncodingConfig()
    sample_points = np.atleast_2d(sample_points)
    ray_dirs = np.atleast_2d(ray_dirs)
    s = sample_points.shape[0]
    sid, pid = pairs[0], pairs[1]

    counts = np.bincount(sid, minlength=s).astype(np.float64)
    empty = counts == 0
    inv_k = 1.0 / np.maximum(counts, 1.0)

    p = positions.gather_rows(pid)                          # [E, 3]
    l = p - Tensor(sample_points[sid])                      # local vectors
    dist = _safe_norm(l)                                    # [E]
    w = (1.0 - (dist * (1.0 / r_s)) ** 3).maximum(0.0)      # kernel weights

    sigma_p = w.segment_sum(sid, s)                         # [S]

    wp = w.reshape((-1, 1)) * p
    pc_num = wp.segment_sum(sid, s)
    if cfg.center_mode == "normalized":
        denom = sigma_p.maximum(1e-12).reshape((s, 1))
        p_c = pc_num / denom
    else:
        p_c = pc_num * Tensor(inv_k[:, None])
    # empty neighborhoods: p_c := x (the raw sum is zero there)
    p_c = p_c + Tensor(np.where(empty[:, None], sample_points, 0.0))

    l_mean = l.segment_sum(sid, s) * Tensor(inv_k[:, None])
    dev = l - l_mean.gather_rows(sid)
    if cfg.deformation_mode == "vector":
        v_d = _abs(dev).segment_sum(sid, s) * Tensor(inv_k[:, None])   # [S, 3]
    else:
        v_d = (_safe_norm(dev).segment_sum(sid, s) * Tensor(inv_k)).reshape((s, 1))

    rel = p_c - Tensor(origin.reshape(1, 3))
    rel_norm = _safe_norm(rel).reshape((s, 1))
    degenerate = (rel_norm.data < 1e-12)[:, 0] | empty
    unit = rel / rel_norm.maximum(1e-12)
    mask = Tensor(np.where(degenerate[:, None], 0.0, 1.0))
    d_c = unit * mask + Tensor(np.where(degenerate[:, None], ray_dirs, 0.0))

    # normalize scales before the sinusoids
    pc_norm = (p_c - Tensor(box.center.reshape(1, 3))) * Tensor((2.0 / box.extent).reshape(1, 3))
    sig_norm = (sigma_p * (1.0 / cfg.sigma_cap)).reshape((s, 1))
    vd_norm = v_d * (1.0 / r_s)

    e_x = concat([
        positional_encode(pc_norm, cfg.levels_x),
        positional_encode(sig_norm, cfg.levels_x),
        positional_encode(vd_norm, cfg.levels_x),
    ], axis=-1)
    e_d = positional_encode(d_c, cfg.levels_d)

    stats = {"p_c": p_c, "sigma_p": sigma_p, "v_d": v_d, "d_c": d_c,
             "counts": counts, "empty": empty}
    return e_x, e_d, stats


def neighborhood_stats_np(sample_points: np.ndarray, ray_dirs: np.ndarray,
                          origin: np.ndarray, positions: np.ndarray, pairs,
                          r_s: float):
    """Plain-numpy twin of `encode_batch`'s statistics (no tape, no encoding).

    Used by the analytic reference appearance and as an oracle in tests.
    """
    sample_points = np.atleast_2d(sample_points)
    s = sample_points.shape[0]
    sid, pid = pairs[0], pairs[1]
    counts = np.bincount(sid, minlength=s).astype(np.float64)
    empty = counts == 0
    inv_k = 1.0 / np.maximum(counts, 1.0)

    p = positions[pid]
    l = p - sample_points[sid]
    dist = np.linalg.norm(l, axis=1)
    w = np.maximum(1.0 - (dist / r_s) ** 3, 0.0)

    sigma_p = scatter_add_rows(w, sid, (s,))
    p_c = scatter_add_rows(w[:, None] * p, sid, (s, 3)) * inv_k[:, None]
    p_c = np.where(empty[:, None], sample_points, p_c)

    l_mean = scatter_add_rows(l, sid, (s, 3)) * inv_k[:, None]
    dev = l - l_mean[sid]
    v_d = scatter_add_rows(np.linalg.norm(dev, axis=1), sid, (s,)) * inv_k

    rel = p_c - origin.reshape(1, 3)
    norm = np.linalg.norm(rel, axis=1, keepdims=True)
    degenerate = (norm[:, 0] < 1e-12) | empty
    d_c = np.where(degenerate[:, None], np.atleast_2d(ray_dirs),
                   rel / np.maximum(norm, 1e-12))
    return {"p_c": p_c, "sigma_p": sigma_p, "v_d": v_d, "d_c": d_c,
            "counts": counts, "empty": empty}
