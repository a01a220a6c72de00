"""Particle-driven neural radiance field renderer.

Per pixel: ray -> stratified coarse samples -> ball query + neighborhood
encoding -> coarse field -> importance resampling -> fine field -> volume
rendering, with residual transmittance composited over a known constant
background color. Coarse and fine networks are separate parameter sets
sharing the conditioning scheme.

The density head sees only the view-independent features; the color head
additionally sees the direction features. Density uses a shifted softplus,
color a logistic squashing, so sigma >= 0 and colors stay in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import Linear, Tensor, concat, no_grad, positional_encode
from .encoding import EncodingConfig, encode_batch
from .errors import ConfigError, DimensionError
from .geometry import Box, Camera, ParticleState, SpatialHash

_SIGMA_SHIFT = 1.0   # softplus(raw - shift): mostly-transparent start


@dataclass
class RenderConfig:
    n_coarse: int = 64
    n_fine: int = 128
    rays_per_batch: int = 1024
    near: Optional[float] = None       # global override of the per-ray box bounds
    far: Optional[float] = None
    box_margin: float = 0.1            # near/far come from the box inflated by this
    background: np.ndarray = field(default_factory=lambda: np.array([1.0, 1.0, 1.0]))

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)
        if self.n_coarse < 1 or self.n_fine < 0:
            raise ConfigError("need n_coarse >= 1 and n_fine >= 0")
        if (self.near is None) != (self.far is None):
            raise ConfigError("near/far overrides must be given together")
        if self.near is not None and not (self.far > self.near > 0):
            raise ConfigError("need far > near > 0")


@dataclass
class RaySampleBatch:
    """Depth-sorted samples along one ray bundle."""

    positions: np.ndarray   # [R, S, 3]
    depths: np.ndarray      # [R, S]
    deltas: np.ndarray      # [R, S]; last interval runs to the far bound
    near: np.ndarray        # [R]
    far: np.ndarray         # [R]


@dataclass
class RadianceSample:
    """Volume density and emitted color at one sample point."""

    sigma: float
    color: np.ndarray

    def __post_init__(self):
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)
        if self.sigma < 0:
            raise ConfigError("volume density must be non-negative")
        if np.any(self.color < 0) or np.any(self.color > 1):
            raise ConfigError("color must lie in [0, 1]^3")


def _as_bounds(value, n: int) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    return np.full(n, float(arr)) if arr.ndim == 0 else arr.reshape(n)


def stratified_samples(near, far, n_coarse: int, rng: np.random.Generator,
                       n_rays: Optional[int] = None) -> np.ndarray:
    """One uniform sample per stratum of [near, far]; returns depths [R, n]."""
    if n_rays is None:
        n_rays = np.asarray(near).reshape(-1).shape[0] if np.ndim(near) else 1
    near = _as_bounds(near, n_rays)
    far = _as_bounds(far, n_rays)
    if np.any(far <= near) or np.any(near <= 0):
        raise ConfigError("need far > near > 0 for sampling")
    u = rng.uniform(size=(n_rays, n_coarse))
    edges = (np.arange(n_coarse) + u) / n_coarse
    return near[:, None] + (far - near)[:, None] * edges


def hierarchical_resample(weights: np.ndarray, near, far, n_fine: int,
                          rng: np.random.Generator) -> np.ndarray:
    """Inverse-transform samples from the piecewise-constant PDF proportional
    to the per-stratum weights; all-zero rows fall back to uniform."""
    weights = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    if np.any(weights < 0):
        raise ConfigError("resampling weights must be non-negative")
    n_rays, n_bins = weights.shape
    near = _as_bounds(near, n_rays)
    far = _as_bounds(far, n_rays)
    totals = weights.sum(axis=1, keepdims=True)
    w = np.where(totals > 0, weights, 1.0)
    pdf = w / w.sum(axis=1, keepdims=True)
    cdf = np.concatenate([np.zeros((n_rays, 1)), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0
    u = rng.uniform(size=(n_rays, n_fine))
    out = np.empty_like(u)
    for r in range(n_rays):
        idx = np.clip(np.searchsorted(cdf[r], u[r], side="right") - 1, 0, n_bins - 1)
        frac = (u[r] - cdf[r, idx]) / np.maximum(pdf[r, idx], 1e-12)
        out[r] = (idx + np.clip(frac, 0.0, 1.0)) / n_bins
    return near[:, None] + (far - near)[:, None] * out


def merge_depths(coarse: np.ndarray, fine: np.ndarray) -> np.ndarray:
    return np.sort(np.concatenate([coarse, fine], axis=1), axis=1)


def deltas_from_depths(depths: np.ndarray, far: np.ndarray) -> np.ndarray:
    """delta_j = t_{j+1} - t_j; the last interval runs out to the far bound."""
    last = np.maximum(far[:, None] - depths[:, -1:], 0.0)
    return np.concatenate([np.diff(depths, axis=1), last], axis=1)


def sample_batch_for_ray(origin, direction, near: float, far: float,
                         n_coarse: int, rng: np.random.Generator) -> RaySampleBatch:
    depths = stratified_samples(near, far, n_coarse, rng, n_rays=1)
    positions = origin[None, None, :] + direction[None, None, :] * depths[..., None]
    return RaySampleBatch(positions=positions, depths=depths,
                          deltas=deltas_from_depths(depths, np.array([far])),
                          near=np.array([near]), far=np.array([far]))


# -- field network ---------------------------------------------------------------

@dataclass
class FieldNetConfig:
    depth: int = 8
    width: int = 256
    skip_at: int = 4
    color_hidden: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.depth < 2 or not (0 < self.skip_at < self.depth):
            raise ConfigError("need depth >= 2 and 0 < skip_at < depth")


class FieldNet:
    """MLP mapping (pos features, e_x | dir features, e_d) -> (sigma, rgb)."""

    def __init__(self, cfg: FieldNetConfig, enc: EncodingConfig, name: str):
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.enc = enc
        self.name = name
        in_x = enc.point_width + enc.e_x_width
        in_d = enc.dir_width + enc.e_d_width
        self.trunk = []
        w_in = in_x
        for i in range(cfg.depth):
            if i == cfg.skip_at:
                w_in += in_x
            self.trunk.append(Linear(w_in, cfg.width, rng, f"{name}/trunk{i}"))
            w_in = cfg.width
        self.sigma_head = Linear(cfg.width, 1, rng, f"{name}/sigma")
        self.bottleneck = Linear(cfg.width, cfg.width, rng, f"{name}/bottleneck")
        self.color_hidden = Linear(cfg.width + in_d, cfg.color_hidden, rng, f"{name}/color0")
        self.color_out = Linear(cfg.color_hidden, 3, rng, f"{name}/color1")

    def parameters(self) -> list:
        params = []
        for layer in self.trunk:
            params.extend(layer.parameters())
        for layer in (self.sigma_head, self.bottleneck, self.color_hidden, self.color_out):
            params.extend(layer.parameters())
        return params

    def __call__(self, gx: Tensor, ex: Tensor, gd: Tensor, ed: Tensor):
        """Returns (sigma [S], rgb [S, 3]); sigma never sees direction features."""
        if gx.data.shape[-1] != self.enc.point_width or ex.data.shape[-1] != self.enc.e_x_width:
            raise DimensionError("view-independent feature width mismatch",
                                 expected=(self.enc.point_width, self.enc.e_x_width),
                                 got=(gx.data.shape[-1], ex.data.shape[-1]))
        if gd.data.shape[-1] != self.enc.dir_width or ed.data.shape[-1] != self.enc.e_d_width:
            raise DimensionError("view-dependent feature width mismatch",
                                 expected=(self.enc.dir_width, self.enc.e_d_width),
                                 got=(gd.data.shape[-1], ed.data.shape[-1]))
        x_in = concat([gx, ex], axis=-1)
        h = x_in
        for i, layer in enumerate(self.trunk):
            if i == self.cfg.skip_at:
                h = concat([h, x_in], axis=-1)
            h = layer(h).relu()
        sigma = (self.sigma_head(h) - _SIGMA_SHIFT).softplus().reshape((-1,))
        b = self.bottleneck(h)
        c = self.color_hidden(concat([b, gd, ed], axis=-1)).relu()
        rgb = self.color_out(c).sigmoid()
        return sigma, rgb


def field_eval(net: FieldNet, x: np.ndarray, d: np.ndarray, e_x: Tensor, e_d: Tensor,
               box: Box) -> tuple:
    """Evaluate the field at explicit sample points/directions (tape-recorded)."""
    gx = positional_encode(Tensor(box.normalize(np.atleast_2d(x))), net.enc.levels_x)
    gd = positional_encode(Tensor(np.atleast_2d(d)), net.enc.levels_d)
    return net(gx, e_x, gd, e_d)


# -- volume rendering --------------------------------------------------------------

def volume_render(sigma: Tensor, color: Tensor, deltas: np.ndarray,
                  background: np.ndarray):
    """Discrete emission-absorption compositing.

    sigma [R, S], color [R, S, 3], deltas [R, S]. Residual transmittance is
    composited over the background color. Returns (rgb Tensor [R, 3],
    weights ndarray [R, S], transmittance ndarray [R]).
    """
    r, s = sigma.data.shape
    a = sigma * Tensor(deltas)
    cum = a.cumsum(axis=1)
    t_excl = (a - cum).exp()             # exp(-sum_{j<i} sigma_j delta_j)
    alpha = 1.0 - (-a).exp()
    w = t_excl * alpha
    t_total = (-cum.slice_axis(1, s - 1, 1)).exp()      # [R, 1]
    bg = np.broadcast_to(np.asarray(background, dtype=np.float64), (r, 3))
    rgb = (w.reshape((r, s, 1)) * color).sum(axis=1) + t_total * Tensor(bg.copy())
    return rgb, w.data.copy(), t_total.data[:, 0].copy()


def ray_box_bounds(origins: np.ndarray, dirs: np.ndarray, box: Box,
                   margin: float = 0.1):
    """Slab intersection with the margin-inflated box.

    Returns (near [R], far [R], hit [R]); near is clamped positive so samples
    sit in front of the camera.
    """
    big = box.inflated(margin)
    inv = np.where(np.abs(dirs) > 1e-12, 1.0 / np.where(dirs == 0, 1e-30, dirs), 1e30)
    t_lo = (big.lo[None, :] - origins) * inv
    t_hi = (big.hi[None, :] - origins) * inv
    t_near = np.minimum(t_lo, t_hi).max(axis=1)
    t_far = np.maximum(t_lo, t_hi).min(axis=1)
    near = np.maximum(t_near, 1e-4)
    hit = t_far > near + 1e-9
    return near, np.maximum(t_far, near + 1e-9), hit


@dataclass
class RayRender:
    """Differentiable render of a ray bundle."""

    fine: Tensor                  # [R, 3]
    coarse: Tensor                # [R, 3]
    hit: np.ndarray               # [R] bool; misses are constant background
    coarse_weights: np.ndarray    # [R_hit, n_coarse]
    transmittance: np.ndarray     # [R_hit]


class Renderer:
    """Bundles the coarse/fine field nets with scene geometry settings."""

    def __init__(self, box: Box, enc_cfg: EncodingConfig, net_cfg: FieldNetConfig,
                 cfg: RenderConfig):
        self.box = box
        self.enc_cfg = enc_cfg
        self.net_cfg = net_cfg
        self.cfg = cfg
        self.coarse = FieldNet(net_cfg, enc_cfg, "renderer/coarse")
        fine_cfg = FieldNetConfig(**{**net_cfg.__dict__, "seed": net_cfg.seed + 1})
        self.fine = FieldNet(fine_cfg, enc_cfg, "renderer/fine")

    def parameters(self) -> list:
        return self.coarse.parameters() + self.fine.parameters()

    # .....................................................................

    def _eval_samples(self, net: FieldNet, positions_t: Tensor, grid: SpatialHash,
                      r_s: float, points: np.ndarray, dirs_per_sample: np.ndarray,
                      origin: np.ndarray):
        pairs = grid.query_pairs(points, r_s)
        e_x, e_d, _ = encode_batch(positions_t, points, dirs_per_sample, origin,
                                   (pairs[0], pairs[1]), self.box, r_s, self.enc_cfg)
        return field_eval(net, points, dirs_per_sample, e_x, e_d, self.box)

    def render_rays(self, positions_t: Tensor, grid: SpatialHash, r_s: float,
                    origin: np.ndarray, dirs: np.ndarray,
                    rng: np.random.Generator) -> RayRender:
        """Full differentiable pipeline for a bundle of rays from one camera."""
        cfg = self.cfg
        n = dirs.shape[0]
        if cfg.near is not None:
            near = np.full(n, cfg.near)
            far = np.full(n, cfg.far)
            hit = np.ones(n, dtype=bool)
        else:
            near, far, hit = ray_box_bounds(origin[None, :].repeat(n, axis=0), dirs,
                                            self.box, cfg.box_margin)
        bg = np.broadcast_to(cfg.background, (n, 3)).copy()
        if not hit.any():
            const = Tensor(bg)
            empty = np.zeros((0, cfg.n_coarse))
            return RayRender(const, const, hit, empty, np.zeros(0))

        d_h = dirs[hit]
        near_h, far_h = near[hit], far[hit]
        rh = d_h.shape[0]

        depths_c = stratified_samples(near_h, far_h, cfg.n_coarse, rng)
        pts_c = origin[None, None, :] + d_h[:, None, :] * depths_c[..., None]
        dirs_c = np.repeat(d_h, cfg.n_coarse, axis=0)
        sig_c, rgb_c = self._eval_samples(self.coarse, positions_t, grid, r_s,
                                          pts_c.reshape(-1, 3), dirs_c, origin)
        deltas_c = deltas_from_depths(depths_c, far_h)
        coarse_rgb, weights_c, _ = volume_render(sig_c.reshape((rh, cfg.n_coarse)),
                                                 rgb_c.reshape((rh, cfg.n_coarse, 3)),
                                                 deltas_c, cfg.background)

        if cfg.n_fine > 0:
            depths_f = hierarchical_resample(weights_c, near_h, far_h, cfg.n_fine, rng)
            depths_m = merge_depths(depths_c, depths_f)
        else:
            depths_m = depths_c
        s_m = depths_m.shape[1]
        pts_m = origin[None, None, :] + d_h[:, None, :] * depths_m[..., None]
        dirs_m = np.repeat(d_h, s_m, axis=0)
        sig_f, rgb_f = self._eval_samples(self.fine, positions_t, grid, r_s,
                                          pts_m.reshape(-1, 3), dirs_m, origin)
        deltas_m = deltas_from_depths(depths_m, far_h)
        fine_rgb, _, trans = volume_render(sig_f.reshape((rh, s_m)),
                                           rgb_f.reshape((rh, s_m, 3)),
                                           deltas_m, cfg.background)

        fine_full = _scatter_rows(fine_rgb, hit, bg)
        coarse_full = _scatter_rows(coarse_rgb, hit, bg)
        return RayRender(fine_full, coarse_full, hit, weights_c, trans)

    def render_image(self, state: ParticleState, camera: Camera,
                     rng: Optional[np.random.Generator] = None,
                     seed: int = 0) -> tuple:
        """Render a full frame without gradients; returns (image [H, W, 3], aux).

        aux carries the per-pixel residual transmittance map; coarse weights
        are consumed internally by the importance resampling step.
        """
        rng = np.random.default_rng(seed) if rng is None else rng
        r_s = state.search_radius
        grid = SpatialHash(state.positions, r_s)
        pixels = camera.all_pixels()
        dirs = camera.pixel_directions(pixels)
        h, w = camera.height, camera.width
        image = np.empty((h * w, 3))
        trans = np.ones(h * w)
        with no_grad():
            positions_t = Tensor(state.positions)
            for start in range(0, dirs.shape[0], self.cfg.rays_per_batch):
                sl = slice(start, start + self.cfg.rays_per_batch)
                out = self.render_rays(positions_t, grid, r_s, camera.origin,
                                       dirs[sl], rng)
                image[sl] = out.fine.data
                trans_full = np.ones(out.hit.shape[0])
                trans_full[out.hit] = out.transmittance
                trans[sl] = trans_full
        return image.reshape(h, w, 3), {"transmittance": trans.reshape(h, w)}


def _scatter_rows(values: Tensor, mask: np.ndarray, fill: np.ndarray) -> Tensor:
    """Place rows of `values` at mask positions over a constant fill."""
    if mask.all():
        return values
    n = mask.shape[0]
    base = Tensor(np.where(mask[:, None], 0.0, 1.0) * fill)
    idx = np.zeros(n, dtype=np.int64)
    idx[mask] = np.arange(int(mask.sum()))
    expanded = values.gather_rows(idx) * Tensor(mask[:, None].astype(float))
    return expanded + base
