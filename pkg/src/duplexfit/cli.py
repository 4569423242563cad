"""Command-line entry point: synth, init-pose, fit, render, eval, check-grads.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import traceback
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, RunConfig, describe_keys, load_config


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        raise UsageError(message)


def _common(p):
    p.add_argument("--config", type=Path, help="TOML file with flat keys (see list below)")
    p.add_argument("--seed", type=int, help="master seed (overrides the config value)")
    p.add_argument("--threads", type=int, help="torch intra-op threads (overrides the config value)")


def build_parser() -> argparse.ArgumentParser:
    epilog = "configuration keys:\n" + describe_keys()
    parser = _Parser(prog="duplexfit", description=__doc__.splitlines()[0], epilog=epilog,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, help):
        p = sub.add_parser(name, help=help, description=help, epilog=epilog,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        _common(p)
        return p

    p = add("synth", "generate a synthetic dataset")
    p.add_argument("--out", type=Path, required=True)
    p = add("init-pose", "run stage one (root initialisation) and dump diagnostics")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p = add("fit", "run both fitting stages")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--log-every", type=int, default=0, help="print losses every N iterations")
    p = add("render", "render a turntable (or the dataset cameras) from a fitted run")
    p.add_argument("--run", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--views", type=int, default=8, help="turntable views (0 = dataset cameras)")
    p.add_argument("--tau", type=float, default=0.0, help="timestamp of the turntable pose")
    p = add("eval", "compute metrics of a fitted run on a split")
    p.add_argument("--run", type=Path, required=True)
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--data", type=Path, help="dataset (default: the one recorded in the run)")
    p = add("check-grads", "finite-difference check of every gradient in the fitting graph")
    p.add_argument("--out", type=Path, help="write the reports as JSON here")
    p.add_argument("--probes", type=int, default=10)
    p.add_argument("--tolerance", type=float, default=1e-4)
    return parser


def _resolve(args) -> RunConfig:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.threads is not None:
        overrides["threads"] = args.threads
    cfg = load_config(args.config, overrides)
    torch.set_num_threads(cfg.threads)
    return cfg


def _echo(cfg: RunConfig, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.toml").write_text(cfg.to_toml())


def _template(data_dir: Path):
    from .template import build_synthetic_quadruped

    meta = json.loads((Path(data_dir) / "scene.json").read_text())
    return build_synthetic_quadruped(meta["template"])


def _load_data(data_dir: Path):
    from .harness import load_dataset

    if not (Path(data_dir) / "scene.json").exists():
        raise FileNotFoundError(f"{data_dir}: not a dataset directory (scene.json missing)")
    tpl = _template(data_dir)
    obs, gt = load_dataset(data_dir, tpl)
    return tpl, obs, gt


def _load_run(run: Path):
    from .fit import SceneState

    info = Path(run) / "run.json"
    if not info.exists():
        raise FileNotFoundError(f"{run}: not a fit run directory (run.json missing)")
    meta = json.loads(info.read_text())
    return meta, SceneState


def cmd_synth(args, cfg):
    from .harness import generate_scene

    _echo(cfg, args.out)
    scene, obs = generate_scene(cfg, out_dir=args.out)
    print(f"wrote {len(obs)} frames ({len(obs.train)} train / {len(obs.test)} test) to {args.out}")


def cmd_init_pose(args, cfg):
    from .fit import stage_one

    tpl, obs, gt = _load_data(args.data)
    _echo(cfg, args.out)
    init = stage_one(obs, tpl, cfg)
    init.save(args.out / "init_pose.json")
    ok = sum(r is not None for r in init.pnp)
    print(f"stage one: {ok}/{len(init.pnp)} frames solved; diagnostics in {args.out / 'init_pose.json'}")


def cmd_fit(args, cfg):
    from .fit import fit_scene
    from .harness import evaluate

    tpl, obs, gt = _load_data(args.data)
    _echo(cfg, args.out)
    (args.out / "run.json").write_text(json.dumps({"data": str(Path(args.data).resolve())}))
    state, report = fit_scene(obs, tpl, cfg, out_dir=args.out, log_every=args.log_every)
    rep = evaluate(state, obs, "train", gt=gt)
    print(f"fit done in {report.wall_time:.1f}s; train IoU {rep.iou:.4f} PSNR {rep.psnr:.2f}")


def cmd_render(args, cfg):
    from .camera import Camera, look_at
    from .harness import intrinsics_for
    from .renderer import write_png

    meta, SceneState = _load_run(args.run)
    tpl = _template(meta["data"])
    state = SceneState.load(Path(args.run) / "scene", tpl)
    args.out.mkdir(parents=True, exist_ok=True)
    _echo(cfg, args.out)
    if args.views > 0:
        f, c = intrinsics_for(cfg)
        pose = state.pose(args.tau).detach()
        centre = pose.root.apply(tpl.rest_mesh.vertices.mean(0))
        cams = []
        for k in range(args.views):
            phi = 2 * np.pi * k / args.views
            eye = centre + np.array([cfg.orbit_radius * np.cos(phi), cfg.orbit_height, cfg.orbit_radius * np.sin(phi)])
            cams.append((k, args.tau, Camera(f, f, c, c, cfg.image_size, cfg.image_size, look_at(eye, centre))))
    else:
        _, obs, _ = _load_data(meta["data"])
        cams = [(fr.index, fr.timestamp, fr.camera) for fr in obs.frames]
    with torch.no_grad():
        for k, tau, cam in cams:
            r = state.render(cam, tau, seed=k)
            write_png(args.out / f"view_{k:04d}.png", r.rgb)
            write_png(args.out / f"view_{k:04d}_alpha.png", r.alpha)
    print(f"rendered {len(cams)} views to {args.out}")


def cmd_eval(args, cfg):
    from .harness import evaluate

    meta, SceneState = _load_run(args.run)
    data = args.data or Path(meta["data"])
    tpl, obs, gt = _load_data(data)
    state = SceneState.load(Path(args.run) / "scene", tpl)
    out = Path(args.run) / f"eval_{args.split}"
    rep = evaluate(state, obs, args.split, gt=gt, out_dir=out)
    rep.save(Path(args.run) / f"metrics_{args.split}.json")
    print(json.dumps({k: v for k, v in rep.to_dict().items() if k not in ("per_frame", "frames")}, indent=1))


def cmd_check_grads(args, cfg):
    from .diff import gradient_suite

    reps = gradient_suite(h=1e-5, tolerance=args.tolerance, n_probes=args.probes, seed=cfg.seed)
    for name, r in reps.items():
        print(f"{name:16s} {'PASS' if r.passed else 'FAIL'}  max rel error {r.worst:.2e}")
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(json.dumps({k: r.to_dict() for k, r in reps.items()}, indent=1))
    if not all(r.passed for r in reps.values()):
        raise RuntimeError("gradient check failed")


COMMANDS = {"synth": cmd_synth, "init-pose": cmd_init_pose, "fit": cmd_fit, "render": cmd_render,
            "eval": cmd_eval, "check-grads": cmd_check_grads}


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.error("a command is required")
        cfg = _resolve(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    try:
        COMMANDS[args.command](args, cfg)
    except Exception as e:  # runtime failures map to exit code 2
        print(f"error: {e}", file=sys.stderr)
        if "DUPLEXFIT_TRACEBACK" in os.environ:
            traceback.print_exc()
        return 2
    return 0


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
