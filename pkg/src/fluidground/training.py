"""Two-phase training: renderer warm-up on frame 0, then joint optimization
of the transition model and renderer against the observed image sequence.

Every optimization step draws its randomness from a seed sequence keyed on
(seed, phase, step), so a resumed run replays the exact ray/time choices of
an uninterrupted one.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from .autodiff import AdamState, Tensor, adam_step, no_grad, zero_grads
from .benchmark import Benchmark
from .container import load_tensors, save_tensors
from .errors import ConfigError, TapeUsageError
from .geometry import SpatialHash
from .images import load_png
from .metrics import psnr
from .renderer import Renderer
from .transition import TensorState, TransitionModel

PHASES = ("warmup", "joint")
TIME_SAMPLING = ("uniform", "sweep")


@dataclass
class TrainSchedule:
    """Steps, learning rates, and decay events for both phases.

    Decay events are (step, multiplier) pairs applied cumulatively once the
    step is reached; the warm-up renderer rate may instead decay continuously
    as lr * gamma^(step/total).
    """

    warmup_steps: int = 2000
    joint_steps: int = 600
    lr_renderer: float = 5e-4
    lr_transition: float = 2e-3
    rays_per_batch: int = 256
    renderer_decay: list = field(default_factory=list)       # [(step, mult)]
    transition_decay: list = field(default_factory=list)
    warmup_exp_gamma: Optional[float] = 0.1
    time_sampling: str = "uniform"
    bptt_window: int = 0          # 0 = full observed horizon
    log_every: int = 25
    checkpoint_every: int = 0     # 0 = only at phase end
    seed: int = 0

    def __post_init__(self):
        if self.lr_renderer < 0 or self.lr_transition < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.rays_per_batch < 1:
            raise ConfigError("rays_per_batch must be positive")
        if self.time_sampling not in TIME_SAMPLING:
            raise ConfigError(f"time_sampling must be one of {TIME_SAMPLING}")
        for events in (self.renderer_decay, self.transition_decay):
            for step, mult in events:
                if not (0.0 < mult <= 1.0):
                    raise ConfigError("decay multipliers must lie in (0, 1]")

    def renderer_lr_at(self, step: int, phase: str, total: int) -> float:
        lr = self.lr_renderer
        if phase == "warmup" and self.warmup_exp_gamma is not None and total > 0:
            return lr * self.warmup_exp_gamma ** (step / total)
        for event_step, mult in self.renderer_decay:
            if step >= event_step:
                lr *= mult
        return lr

    def transition_lr_at(self, step: int) -> float:
        lr = self.lr_transition
        for event_step, mult in self.transition_decay:
            if step >= event_step:
                lr *= mult
        return lr


def paper_scale_schedule(seed: int = 0) -> TrainSchedule:
    """Full-scale schedule: 100k warm-up steps with exponential decay 0.1,
    500k joint steps, transition rate 1e-6 halved at 10k/30k/50k/100k/300k,
    renderer rate halved at 10k/75k/150k."""
    return TrainSchedule(
        warmup_steps=100_000,
        joint_steps=500_000,
        lr_renderer=5e-4,
        lr_transition=1e-6,
        rays_per_batch=1024,
        renderer_decay=[(10_000, 0.5), (75_000, 0.5), (150_000, 0.5)],
        transition_decay=[(10_000, 0.5), (30_000, 0.5), (50_000, 0.5),
                          (100_000, 0.5), (300_000, 0.5)],
        warmup_exp_gamma=0.1,
        seed=seed,
    )


@dataclass
class LossReport:
    step: int
    phase: str
    loss: float
    mse_per_view: dict
    psnr: float
    wall_clock: float

    def to_record(self) -> dict:
        return {"step": self.step, "phase": self.phase, "loss": self.loss,
                "mse_per_view": self.mse_per_view, "psnr": self.psnr,
                "wall_clock": self.wall_clock}

    def deterministic_fields(self) -> dict:
        """Everything except wall-clock, for replay comparisons."""
        return {"step": self.step, "phase": self.phase, "loss": self.loss,
                "mse_per_view": self.mse_per_view, "psnr": self.psnr}


class LossLog:
    """Line-delimited JSON stream of loss reports."""

    def __init__(self, path: Optional[str]):
        self.path = path
        self.reports: list = []
        if path:
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)

    def append(self, report: LossReport) -> None:
        self.reports.append(report)
        if self.path:
            with open(self.path, "a") as fh:
                json.dump(report.to_record(), fh, sort_keys=True)
                fh.write("\n")


def read_loss_log(path: str) -> list:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def pixel_loss(rendered: Tensor, observed: np.ndarray) -> Tensor:
    """Squared color error summed over channels, averaged over sampled rays."""
    observed = np.asarray(observed, dtype=np.float64)
    if rendered.data.shape != observed.shape:
        raise ConfigError(f"resolution mismatch: {rendered.data.shape} vs {observed.shape}")
    diff = rendered - Tensor(observed)
    return (diff * diff).sum(axis=-1).mean()


def _step_rng(seed: int, phase: str, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, PHASES.index(phase), step]))


class Trainer:
    """Owns the renderer, transition model, optimizers, and checkpoints."""

    def __init__(self, renderer: Renderer, transition: TransitionModel,
                 benchmark: Benchmark, schedule: TrainSchedule,
                 out_dir: Optional[str] = None):
        self.renderer = renderer
        self.transition = transition
        self.benchmark = benchmark
        self.schedule = schedule
        self.out_dir = out_dir
        self.adam_renderer = AdamState(lr=schedule.lr_renderer)
        self.adam_transition = AdamState(lr=schedule.lr_transition)
        self.warmup_step = 0
        self.joint_step = 0
        self._frame0 = benchmark.trajectory.state_at(0)
        self._observed_cache: dict = {}
        self.log = LossLog(os.path.join(out_dir, "loss_log.jsonl") if out_dir else None)

    # -- observation access ---------------------------------------------------

    def observed_image(self, frame: int, cam_name: str) -> np.ndarray:
        key = (frame, cam_name)
        if key not in self._observed_cache:
            self._observed_cache[key] = load_png(self.benchmark.image_path(frame, cam_name))
        return self._observed_cache[key]

    def warmup_views(self) -> list:
        views = self.benchmark.rig.by_role("warmup")
        if not views:
            raise ConfigError("warm-up needs at least one view")
        return views

    # -- warm-up phase ---------------------------------------------------------

    def warmup(self, steps: Optional[int] = None) -> None:
        """Fit the renderer to the frame-0 observations from the warm-up views."""
        steps = self.schedule.warmup_steps if steps is None else steps
        views = self.warmup_views()
        state = self._frame0
        r_s = state.search_radius
        grid = SpatialHash(state.positions, r_s)
        positions_t = Tensor(state.positions)
        params = self.renderer.parameters()
        total = self.schedule.warmup_steps
        while self.warmup_step < steps:
            step = self.warmup_step
            rng = _step_rng(self.schedule.seed, "warmup", step)
            view = views[int(rng.integers(len(views)))]
            cam = self.benchmark.rig.cameras[view]
            observed = self.observed_image(0, view).reshape(-1, 3)
            pix = rng.integers(0, observed.shape[0], size=self.schedule.rays_per_batch)
            dirs = cam.pixel_directions(np.stack([pix % cam.width, pix // cam.width], axis=1))
            t0 = time.perf_counter()
            out = self.renderer.render_rays(positions_t, grid, r_s, cam.origin, dirs, rng)
            loss = pixel_loss(out.fine, observed[pix]) + pixel_loss(out.coarse, observed[pix])
            if not math.isfinite(loss.item()):
                self._abort_non_finite("warmup", step)
            zero_grads(params)
            loss.backward()
            lr = self.schedule.renderer_lr_at(step, "warmup", total)
            adam_step(self.adam_renderer, params, lr=lr)
            self.warmup_step += 1
            self._maybe_report("warmup", self.warmup_step, loss.item(),
                               {view: float(np.mean((out.fine.data - observed[pix]) ** 2))},
                               time.perf_counter() - t0)
            self._maybe_checkpoint("warmup", self.warmup_step, steps)

    # -- joint phase -------------------------------------------------------------

    def joint(self, steps: Optional[int] = None) -> None:
        """Jointly optimize transition + renderer on the observed sequence
        from the fixed training camera; each iteration re-rolls the particle
        trajectory from frame 0 under the current transition parameters."""
        steps = self.schedule.joint_steps if steps is None else steps
        cam = self.benchmark.rig.cameras["train"]
        n_obs = self.benchmark.n_observed
        if n_obs < 2:
            raise ConfigError("joint phase needs at least 2 observed frames")
        r_params = self.renderer.parameters()
        t_params = self.transition.parameters()
        r_s = self._frame0.search_radius
        observed_flat = {
            t: self.observed_image(t, "train").reshape(-1, 3) for t in range(1, n_obs)
        }
        while self.joint_step < steps:
            step = self.joint_step
            rng = _step_rng(self.schedule.seed, "joint", step)
            if self.schedule.time_sampling == "sweep":
                t = 1 + step % (n_obs - 1)
            else:
                t = int(rng.integers(1, n_obs))
            t0 = time.perf_counter()
            rollout_steps = t
            start_state = self._frame0
            if self.schedule.bptt_window and rollout_steps > self.schedule.bptt_window:
                # truncate: advance without tape, then differentiate the tail
                lead = rollout_steps - self.schedule.bptt_window
                with no_grad():
                    lead_states = self.transition.rollout(start_state, lead)
                start_state = lead_states[-1].to_state()
                rollout_steps = self.schedule.bptt_window
            states = self.transition.rollout(start_state, rollout_steps)
            final = states[-1]
            grid = SpatialHash(final.positions.data, r_s)

            observed = observed_flat[t]
            pix = rng.integers(0, observed.shape[0], size=self.schedule.rays_per_batch)
            dirs = cam.pixel_directions(np.stack([pix % cam.width, pix // cam.width], axis=1))
            out = self.renderer.render_rays(final.positions, grid, r_s, cam.origin, dirs, rng)
            loss = pixel_loss(out.fine, observed[pix]) + pixel_loss(out.coarse, observed[pix])
            if not math.isfinite(loss.item()):
                self._abort_non_finite("joint", step)
            zero_grads(r_params)
            zero_grads(t_params)
            loss.backward()
            lr_r = self.schedule.renderer_lr_at(step, "joint", steps)
            lr_t = self.schedule.transition_lr_at(step)
            adam_step(self.adam_renderer, r_params, lr=lr_r)
            adam_step(self.adam_transition, t_params, lr=lr_t)
            self.joint_step += 1
            self._maybe_report("joint", self.joint_step, loss.item(),
                               {"train": float(np.mean((out.fine.data - observed[pix]) ** 2))},
                               time.perf_counter() - t0)
            self._maybe_checkpoint("joint", self.joint_step, steps)

    # -- objective probes ----------------------------------------------------------

    def warmup_objective(self, stride: int = 2) -> float:
        """Deterministic warm-up objective on a fixed subsampled pixel grid."""
        state = self._frame0
        total, count = 0.0, 0
        for view in self.warmup_views():
            cam = self.benchmark.rig.cameras[view]
            rendered, _ = self.renderer.render_image(state, cam, seed=12345)
            observed = self.observed_image(0, view)
            sub = (slice(None, None, stride), slice(None, None, stride))
            diff = (rendered[sub] - observed[sub]) ** 2
            total += float(diff.sum(axis=-1).mean())
            count += 1
        return total / count

    def heldout_psnr(self, frame: int = 0) -> float:
        views = self.benchmark.rig.by_role("heldout")
        if not views:
            raise ConfigError("no held-out view in the camera rig")
        cam = self.benchmark.rig.cameras[views[0]]
        state = self.benchmark.trajectory.state_at(frame)
        rendered, _ = self.renderer.render_image(state, cam, seed=54321)
        return psnr(rendered, self.observed_image(frame, views[0]))

    # -- reporting / checkpointing ----------------------------------------------------

    def _maybe_report(self, phase: str, step: int, loss: float, mse_per_view: dict,
                      elapsed: float) -> None:
        if step % self.schedule.log_every == 0 or step == 1:
            mse = float(np.mean(list(mse_per_view.values())))
            value = math.inf if mse == 0 else -10.0 * math.log10(mse)
            self.log.append(LossReport(step=step, phase=phase, loss=loss,
                                       mse_per_view=mse_per_view, psnr=value,
                                       wall_clock=elapsed))

    def _maybe_checkpoint(self, phase: str, step: int, total: int) -> None:
        if not self.out_dir:
            return
        every = self.schedule.checkpoint_every
        if step == total or (every and step % every == 0):
            self.save_checkpoint(os.path.join(self.out_dir, f"{phase}-{step}.ckpt"))

    def _abort_non_finite(self, phase: str, step: int) -> None:
        if self.out_dir:
            self.save_checkpoint(os.path.join(self.out_dir, f"{phase}-abort.ckpt"))
        raise TapeUsageError(f"non-finite loss at {phase} step {step}; "
                             f"last-good checkpoint saved" if self.out_dir else
                             f"non-finite loss at {phase} step {step}")

    # -- checkpoint container ------------------------------------------------------------

    def state_tensors(self) -> dict:
        out = {}
        for p in self.renderer.parameters() + self.transition.parameters():
            out[p.name] = p.data
        for tag, adam in (("renderer", self.adam_renderer), ("transition", self.adam_transition)):
            out[f"adam/{tag}/step"] = np.array(float(adam.step_count))
            for key, buf in adam.m.items():
                out[f"adam/{tag}/m/{key}"] = buf
            for key, buf in adam.v.items():
                out[f"adam/{tag}/v/{key}"] = buf
        out["trainer/warmup_step"] = np.array(float(self.warmup_step))
        out["trainer/joint_step"] = np.array(float(self.joint_step))
        out["trainer/seed"] = np.array(float(self.schedule.seed))
        return out

    def save_checkpoint(self, path: str) -> None:
        save_tensors(path, self.state_tensors())

    def load_checkpoint(self, path: str, strict: bool = True) -> None:
        """Restore parameters/optimizer state; unknown names in the container
        are ignored so transition-only checkpoints load cleanly."""
        blob = load_tensors(path)
        restore_parameters(blob, self.renderer.parameters() + self.transition.parameters(),
                           strict=strict)
        for tag, adam in (("renderer", self.adam_renderer), ("transition", self.adam_transition)):
            key = f"adam/{tag}/step"
            if key in blob:
                adam.step_count = int(blob[key])
                adam.m = {k[len(f"adam/{tag}/m/"):]: v for k, v in blob.items()
                          if k.startswith(f"adam/{tag}/m/")}
                adam.v = {k[len(f"adam/{tag}/v/"):]: v for k, v in blob.items()
                          if k.startswith(f"adam/{tag}/v/")}
        if "trainer/warmup_step" in blob:
            self.warmup_step = int(blob["trainer/warmup_step"])
        if "trainer/joint_step" in blob:
            self.joint_step = int(blob["trainer/joint_step"])


def restore_parameters(blob: dict, params: list, strict: bool = True) -> None:
    for p in params:
        if p.name in blob:
            if blob[p.name].shape != p.data.shape:
                raise ConfigError(f"checkpoint tensor {p.name} has shape "
                                  f"{blob[p.name].shape}, expected {p.data.shape}")
            p.data = blob[p.name].astype(p.data.dtype)
        elif strict:
            raise ConfigError(f"checkpoint is missing tensor {p.name}")


def latest_checkpoint(directory: str) -> Optional[str]:
    if not os.path.isdir(directory):
        return None
    best = None
    best_key = (-1, -1)
    for name in os.listdir(directory):
        if not name.endswith(".ckpt"):
            continue
        stem = name[:-5]
        parts = stem.rsplit("-", 1)
        if len(parts) != 2 or not parts[1].isdigit():
            continue
        phase_order = PHASES.index(parts[0]) if parts[0] in PHASES else -1
        key = (phase_order, int(parts[1]))
        if key > best_key:
            best_key = key
            best = os.path.join(directory, name)
    return best
