"""Command-line entry points: train, render, eval, gradcheck, make-synthetic."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import gradcheck as gradcheck_suite
from .config import (TrainConfig, apply_overrides, configs_from_dict,
                     load_config_file, toy)
from .geometry import CameraModel
from .metrics import PSNR_CAP_DB
from .model import SingleImageNerf
from .scenes import (Scene, SceneView, load_image, load_scene, make_sphere_scene,
                     orbit_cameras, save_image, save_scene)
from .training import Trainer, evaluate_scene, load_model
from .metrics import MetricReport, psnr, ssim


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vitnerf",
                                     description="single-image view synthesis")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="flat key=value config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", type=Path, help="output directory")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="config override (repeatable)")

    p = sub.add_parser("train", help="train on a scene directory")
    common(p)
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--steps", type=int, help="override total_steps")
    p.add_argument("--input-view", type=int, help="source view index")
    p.add_argument("--views", type=str, help="comma list of training view indices")

    p = sub.add_parser("render", help="render an orbit from a checkpoint")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--scene", type=Path, help="scene dir (source view from manifest)")
    p.add_argument("--input-view", type=int)
    p.add_argument("--image", type=Path, help="bare source image (identity input pose)")
    p.add_argument("--orbit-n", type=int, default=8)
    p.add_argument("--orbit-radius", type=float, default=2.7)
    p.add_argument("--orbit-elev", type=float, default=0.0)

    p = sub.add_parser("eval", help="render all non-input views and report metrics")
    common(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--input-view", type=int)
    p.add_argument("--bypass", action="store_true",
                   help="diagnostic: score ground truth against itself, no model")

    p = sub.add_parser("gradcheck", help="finite-difference verification suites")
    common(p)

    p = sub.add_parser("make-synthetic", help="write the bundled sphere scene")
    common(p)
    p.add_argument("--views", type=int, default=12)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--input-view", type=int, default=0)
    return parser


def _configs(args, base=None):
    values = load_config_file(args.config) if args.config else {}
    values = apply_overrides(values, args.overrides)
    return configs_from_dict(values, base=base or toy())


def cmd_train(args) -> int:
    model_cfg, train_cfg = _configs(args)
    if args.steps is not None:
        train_cfg.total_steps = args.steps
    if args.seed is not None:
        train_cfg.seed = args.seed
    scene = load_scene(args.scene)
    if args.input_view is not None:
        scene.input_view = args.input_view
    h, w = scene.resolution
    p = model_cfg.vit.patch_size
    if h % (2 * p) or w % (2 * p):
        raise ValueError(f"resolution {h}x{w} must be divisible by 2*patch_size={2 * p}")
    train_views = None
    if args.views:
        train_views = [int(v) for v in args.views.split(",")]
    model = SingleImageNerf(model_cfg, seed=train_cfg.seed)
    trainer = Trainer(model, scene, train_cfg, train_views=train_views)
    out = args.out or Path("out")
    trainer.run(out_dir=out, log=print)
    print(f"final checkpoint: {out / 'checkpoint_final.vn'}")
    return 0


def _identity_camera(resolution: tuple[int, int], model_cfg, radius: float) -> CameraModel:
    h, w = resolution
    return CameraModel(fx=float(w), fy=float(w), cx=w / 2, cy=h / 2,
                       pose=np.eye(4), t_near=max(radius - 1.1, 0.05),
                       t_far=radius + 1.1, height=h, width=w)


def cmd_render(args) -> int:
    model, meta = load_model(args.checkpoint)
    rng = np.random.default_rng(args.seed)
    if args.scene is not None:
        scene = load_scene(args.scene)
        idx = args.input_view if args.input_view is not None else scene.input_view
        src = scene.views[idx]
        background = scene.background
    elif args.image is not None:
        image, _ = load_image(args.image)
        cam = _identity_camera(image.shape[1:], model.cfg, args.orbit_radius)
        src = SceneView(image=image, camera=cam, id=str(args.image))
        background = np.zeros(3)
    else:
        raise ValueError("render needs --scene or --image")
    h, w = src.image.shape[1:]
    p = model.cfg.vit.patch_size
    if h % (2 * p) or w % (2 * p):
        raise ValueError(f"source image {h}x{w} must be divisible by 2*patch_size={2 * p}")
    out = args.out or Path("renders")
    out.mkdir(parents=True, exist_ok=True)
    feats = model.featurize(src.image, mode="eval")
    cams = orbit_cameras(src.camera, args.orbit_n, args.orbit_radius, args.orbit_elev)
    for i, cam in enumerate(cams):
        frame = model.render_view(cam, src.camera, feats, background, rng)
        save_image(out / f"frame_{i:04d}.png", frame)
    print(f"wrote {len(cams)} frames to {out}")
    return 0


def cmd_eval(args) -> int:
    scene = load_scene(args.scene)
    input_view = args.input_view if args.input_view is not None else scene.input_view
    if len(scene.views) < 2:
        raise ValueError("eval needs a manifest with at least 2 views")
    if args.bypass:
        report = MetricReport()
        for i, view in enumerate(scene.views):
            if i == input_view:
                continue
            report.add(view.id, psnr(view.image, view.image), ssim(view.image, view.image))
    else:
        if args.checkpoint is None:
            raise ValueError("eval needs --checkpoint (or --bypass)")
        model, _ = load_model(args.checkpoint)
        report = evaluate_scene(model, scene, input_view=input_view, seed=args.seed)
    table = report.format_table()
    print(table)
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "metrics.txt").write_text(table + "\n")
    return 0


def cmd_gradcheck(args) -> int:
    ok = gradcheck_suite.run_all(seed=args.seed, log=print)
    return 0 if ok else 1


def cmd_make_synthetic(args) -> int:
    out = args.out or Path("scene")
    scene = make_sphere_scene(n_views=args.views, resolution=args.resolution,
                              input_view=args.input_view)
    save_scene(out, [v.image for v in scene.views], [v.camera for v in scene.views],
               scene.background, input_view=args.input_view)
    print(f"wrote {args.views} views to {out}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "render": cmd_render,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "make-synthetic": cmd_make_synthetic,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.verb](args)
    except Exception as e:  # single actionable line on stderr, nonzero exit
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
