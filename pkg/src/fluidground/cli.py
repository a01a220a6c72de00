"""Command-line interface.

Verbs: generate, train, eval, render, rollout, config-schema.
Exit codes: 0 success, 2 config error, 3 runtime divergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Optional

import numpy as np

from . import version_string
from .benchmark import generate_benchmark, load_benchmark
from .config import SceneConfig, load_config_file, resolve, schema_reference
from .container import load_tensors
from .errors import (CheckpointFormatError, ConfigError, RolloutDivergedError,
                     SimulationDivergedError, TapeUsageError)
from .evaluation import run_eval, write_report
from .images import save_png
from .renderer import Renderer
from .trajectory import Trajectory, load_trajectory, save_trajectory
from .training import Trainer, latest_checkpoint, restore_parameters
from .transition import TransitionModel

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fluidground",
                                     description="Ground particle fluid dynamics from rendered image sequences.")
    parser.add_argument("--version", action="version", version=version_string())
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--preset", help="named scene preset")
        p.add_argument("--seed", type=int, help="override the config seed")

    g = sub.add_parser("generate", help="simulate a benchmark and render observations")
    common(g)
    g.add_argument("--out", required=True, help="benchmark output directory")

    t = sub.add_parser("train", help="run warm-up and/or joint training on a benchmark")
    common(t)
    t.add_argument("--benchmark", required=True)
    t.add_argument("--out", required=True, help="checkpoint/log directory")
    t.add_argument("--phase", choices=("warmup", "joint", "both"), default="both")
    t.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")

    e = sub.add_parser("eval", help="particle distances and image metrics for a checkpoint")
    common(e)
    e.add_argument("--benchmark", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--views", help="comma-separated camera names (default: held-out view)")
    e.add_argument("--frames", help="comma-separated frame indices")
    e.add_argument("--distance-mode", choices=("nearest", "indexed"))
    e.add_argument("--save-renders", action="store_true")

    r = sub.add_parser("render", help="render frames from a particle source")
    common(r)
    r.add_argument("--benchmark", required=True)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--camera", default=None, help="camera name (default: held-out view)")
    r.add_argument("--frames", default="0", help="comma-separated frame indices")
    r.add_argument("--particles", choices=("rollout", "oracle"), default="rollout",
                   help="condition on rolled-out or ground-truth particles")
    r.add_argument("--trajectory", help="external trajectory file overriding --particles")

    ro = sub.add_parser("rollout", help="roll the transition model and save a trajectory")
    common(ro)
    ro.add_argument("--benchmark", required=True)
    ro.add_argument("--checkpoint", required=True)
    ro.add_argument("--out", required=True, help="output trajectory file")
    ro.add_argument("--steps", type=int, default=None)

    s = sub.add_parser("config-schema", help="print the configuration reference")
    s.add_argument("--json", action="store_true", help="print resolved defaults as JSON")
    return parser


def _load_scene(args) -> SceneConfig:
    raw = {}
    if args.config:
        cfg = load_config_file(args.config, seed=args.seed)
        if args.preset:
            raise ConfigError("give either --config or --preset, not both")
        return cfg
    if args.preset:
        raw["preset"] = args.preset
    return resolve(raw, seed=args.seed)


def _build_models(cfg: SceneConfig, benchmark) -> tuple:
    preset = benchmark.preset
    renderer = Renderer(preset.box, cfg.encoding_config(), cfg.field_net_config(),
                        cfg.render_config())
    transition = TransitionModel(cfg.transition_config(), preset.gravity, preset.dt,
                                 preset.particle_radius, preset.box)
    return renderer, transition


def _parse_int_list(text: Optional[str]):
    if not text:
        return None
    try:
        return [int(v) for v in text.split(",") if v.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from exc


def cmd_generate(args) -> int:
    cfg = _load_scene(args)
    bench = generate_benchmark(
        cfg.fluid_preset(), cfg.camera_rig(), cfg.appearance(), args.out,
        observed=cfg.observed, image_set=cfg.tree["image_set"],
        write_pfm=cfg.tree["pfm"],
        reference_samples=cfg.tree["renderer"]["reference_samples"],
        config_echo=cfg.echo())
    print(f"benchmark written to {bench.directory} "
          f"({len(bench.manifest['images'])} images, "
          f"{bench.manifest['split']['observed']}/{bench.manifest['split']['future']} split)")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_scene(args)
    benchmark = load_benchmark(args.benchmark)
    renderer, transition = _build_models(cfg, benchmark)
    trainer = Trainer(renderer, transition, benchmark, cfg.schedule(), out_dir=args.out)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "train_config.json"), "w") as fh:
        json.dump({"version": version_string(), "config": cfg.echo()}, fh,
                  indent=1, sort_keys=True)
        fh.write("\n")
    if args.resume:
        ckpt = latest_checkpoint(args.out)
        if ckpt is None:
            raise ConfigError(f"--resume given but no checkpoint in {args.out}")
        trainer.load_checkpoint(ckpt)
        print(f"resumed from {ckpt} (warmup={trainer.warmup_step}, joint={trainer.joint_step})")
    if args.phase in ("warmup", "both"):
        trainer.warmup()
    if args.phase in ("joint", "both"):
        trainer.joint()
    final = os.path.join(args.out, "final.ckpt")
    trainer.save_checkpoint(final)
    print(f"training complete; checkpoint at {final}")
    return EXIT_OK


def _restore_models(cfg: SceneConfig, benchmark, checkpoint: str):
    renderer, transition = _build_models(cfg, benchmark)
    blob = load_tensors(checkpoint)
    restore_parameters(blob, renderer.parameters() + transition.parameters(), strict=False)
    return renderer, transition


def cmd_eval(args) -> int:
    cfg = _load_scene(args)
    benchmark = load_benchmark(args.benchmark)
    renderer, transition = _restore_models(cfg, benchmark, args.checkpoint)
    views = args.views.split(",") if args.views else None
    report = run_eval(renderer, transition, benchmark,
                      views=views, frames=_parse_int_list(args.frames),
                      distance_mode=args.distance_mode or cfg.distance_mode,
                      render_out=os.path.join(args.out, "renders") if args.save_renders else None,
                      config_echo=cfg.echo())
    json_path, text_path = write_report(report, args.out)
    sys.stdout.write(report.table())
    print(f"report written to {json_path} and {text_path}")
    return EXIT_OK


def cmd_render(args) -> int:
    cfg = _load_scene(args)
    benchmark = load_benchmark(args.benchmark)
    renderer, transition = _restore_models(cfg, benchmark, args.checkpoint)
    frames = _parse_int_list(args.frames) or [0]
    cam_name = args.camera or benchmark.rig.by_role("heldout")[0]
    if cam_name not in benchmark.rig.cameras:
        raise ConfigError(f"unknown camera {cam_name!r}")
    cam = benchmark.rig.cameras[cam_name]

    if args.trajectory:
        source = load_trajectory(args.trajectory)
        positions = source.positions.astype(np.float64)
    elif args.particles == "oracle":
        positions = benchmark.trajectory.positions.astype(np.float64)
    else:
        last = max(frames)
        positions = transition.rollout_positions(benchmark.trajectory.state_at(0), max(last, 1))
    os.makedirs(args.out, exist_ok=True)
    state0 = benchmark.trajectory.state_at(0)
    for frame in frames:
        if not (0 <= frame < positions.shape[0]):
            raise ConfigError(f"frame {frame} missing from the particle source "
                              f"(have 0..{positions.shape[0] - 1})")
        state = state0.__class__(positions[frame], np.zeros_like(positions[frame]),
                                 state0.particle_radius, state0.boundary_positions)
        image, _ = renderer.render_image(state, cam, seed=2000 + frame)
        path = os.path.join(args.out, f"render_f{frame:03d}_{cam_name}.png")
        save_png(path, image)
        print(f"wrote {path}")
    return EXIT_OK


def cmd_rollout(args) -> int:
    cfg = _load_scene(args)
    benchmark = load_benchmark(args.benchmark)
    _, transition = _restore_models(cfg, benchmark, args.checkpoint)
    steps = args.steps if args.steps is not None else benchmark.n_frames - 1
    positions = transition.rollout_positions(benchmark.trajectory.state_at(0), steps)
    dt = benchmark.preset.dt
    velocities = np.zeros_like(positions)
    velocities[1:] = (positions[1:] - positions[:-1]) / dt
    traj = Trajectory(positions=positions.astype(np.float32),
                      velocities=velocities.astype(np.float32),
                      boundary=benchmark.trajectory.boundary,
                      particle_radius=benchmark.preset.particle_radius,
                      box=benchmark.preset.box)
    save_trajectory(args.out, traj)
    print(f"rollout of {steps} steps written to {args.out}")
    return EXIT_OK


def cmd_config_schema(args) -> int:
    if args.json:
        print(json.dumps(resolve({}).echo(), indent=1, sort_keys=True))
    else:
        sys.stdout.write(schema_reference())
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "render": cmd_render,
    "rollout": cmd_rollout,
    "config-schema": cmd_config_schema,
}


def main(argv: Optional[list] = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SimulationDivergedError, RolloutDivergedError, TapeUsageError) as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CheckpointFormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
