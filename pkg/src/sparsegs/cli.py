"""Command-line entry points: synth | init | train | render | eval."""

from __future__ import annotations

import argparse
import json
import os
import struct
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import initializer, metrics, synthetic
from .cameras import find_view, load_cameras
from .errors import SplatError
from .pruning import build_feature_stack, load_feature_stack
from .rasterizer import render
from .trainer import (
    TrainConfig,
    config_from_file,
    init_state,
    load_checkpoint_field,
    save_checkpoint,
    train,
)

SEED_ENV_VAR = "SPARSEGS_SEED"


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except SplatError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparsegs")
    parser.add_argument("--threads", type=int, default=1, help="worker thread cap")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    p.add_argument("--preset", choices=synthetic.PRESETS, default="cluster")
    p.add_argument("--n-gaussians", type=int, default=100)
    p.add_argument("--n-views", type=int, default=8)
    p.add_argument("--image-size", type=str, default="64x64", help="HxW")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-matches", type=int, default=300)
    p.add_argument("--pixel-noise", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("init", help="build a seed point cloud from matches")
    p.add_argument("--cameras", required=True)
    p.add_argument("--matches", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--filter-outliers", action="store_true")
    p.add_argument("--filter-k", type=int, default=8)
    p.add_argument("--filter-std", type=float, default=2.0)
    p.add_argument("--fill", type=int, default=-1, help="-1 = 1000 per view capped at 5000")
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--bbox", type=str, default=None, help="x0,y0,z0,x1,y1,z1")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_init)

    p = sub.add_parser("train", help="optimize a Gaussian field")
    p.add_argument("--data", required=True, help="dataset directory from synth")
    p.add_argument("--seed-ply", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--features", default=None, help="feature-stack file (MCFS)")
    p.add_argument("--no-mvc-prune", action="store_true")
    p.add_argument("--no-eadr", action="store_true")
    p.add_argument("--preset", choices=sorted(("forward_facing", "panoramic")), default=None)
    p.add_argument("--total-iters", type=int, default=None)
    p.add_argument("--prune-i-step", type=int, default=None)
    p.add_argument("--prune-steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--tile-size", type=int, default=None)
    p.add_argument("--sh-degree", type=int, default=None)
    p.add_argument("--level-dims", type=str, default=None, help="comma-separated")
    p.add_argument("--opacity-reset-interval", type=int, default=None)
    p.add_argument("--densify-interval", type=int, default=None)
    p.add_argument("--log-every", type=int, default=1)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("render", help="render one view from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--view-id", type=int, required=True)
    p.add_argument("--out", required=True, help="output path prefix")
    p.add_argument("--background", type=str, default="0.5,0.5,0.5")
    p.add_argument("--tile-size", type=int, default=16)
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("eval", help="score held-out views")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="directory with cameras.json + images")
    p.add_argument("--out", required=True)
    p.add_argument("--background", type=str, default="0.5,0.5,0.5")
    p.add_argument("--masks", default=None, help="directory of mask_<id>.png files")
    p.add_argument("--tile-size", type=int, default=16)
    p.set_defaults(func=_cmd_eval)
    return parser


def _cmd_synth(args) -> int:
    h, w = (int(v) for v in args.image_size.lower().split("x"))
    scene = synthetic.make_scene(
        args.preset,
        n_gaussians=args.n_gaussians,
        n_views=args.n_views,
        image_size=(h, w),
        rng_seed=args.seed,
    )
    matches = initializer.generate_matches(
        scene, scene.views, args.n_matches, pixel_noise_std=args.pixel_noise, rng_seed=args.seed
    )
    synthetic.write_dataset(scene, args.out, matches)
    print(f"wrote {args.out}: {args.n_views} train views, {args.n_views} held-out, {len(matches)} matches")
    return 0


def _cmd_init(args) -> int:
    views = load_cameras(args.cameras)
    matches = initializer.load_matches(args.matches)
    cloud = initializer.build_seed_cloud(matches, views)
    if args.filter_outliers:
        cloud = initializer.filter_outliers(cloud, k=args.filter_k, std_ratio=args.filter_std)
    n_matched = len(cloud)

    n_fill = args.fill if args.fill >= 0 else min(1000 * len(views), 5000)
    if n_fill > 0:
        if args.bbox:
            vals = [float(v) for v in args.bbox.split(",")]
            b_min, b_max = np.array(vals[:3]), np.array(vals[3:])
        else:
            b_min, b_max = initializer.default_bounding_box(cloud)
        cloud = initializer.random_fill(
            cloud, b_min, b_max, n_fill, resolution=args.resolution, rng_seed=args.seed
        )
    initializer.save_seed_ply(args.out, cloud)
    print(f"matched={n_matched} filled={len(cloud) - n_matched}")
    return 0


def _cmd_train(args) -> int:
    overrides = config_from_file(args.config) if args.config else {}
    flag_map = {
        "preset": args.preset,
        "total_iters": args.total_iters,
        "prune_i_step": args.prune_i_step,
        "prune_steps_total": args.prune_steps,
        "rng_seed": args.seed,
        "tile_size": args.tile_size,
        "sh_degree": args.sh_degree,
        "opacity_reset_interval": args.opacity_reset_interval,
        "densify_interval": args.densify_interval,
    }
    for key, value in flag_map.items():
        if value is not None:
            overrides[key] = value
    if args.level_dims:
        overrides["level_dims"] = tuple(int(v) for v in args.level_dims.split(","))
    if args.no_mvc_prune:
        overrides["mvc_prune_enabled"] = False
    if args.no_eadr:
        overrides["eadr_enabled"] = False
    if os.environ.get(SEED_ENV_VAR):
        overrides["rng_seed"] = int(os.environ[SEED_ENV_VAR])
    config = TrainConfig(**overrides).resolved()

    data = Path(args.data)
    views = load_cameras(data / "cameras.json")
    seed_cloud = initializer.load_seed_ply(args.seed_ply)
    state = init_state(seed_cloud, views, config)

    features = None
    if config.mvc_prune_enabled:
        if args.features:
            features = load_feature_stack(args.features)
        else:
            features = build_feature_stack(views, config.level_dims)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train(state, views, features, log_path=out / "loss.csv", log_every=args.log_every)
    save_checkpoint(state, out)
    print(f"trained {config.total_iters} iterations, {len(state.field)} gaussians -> {out}")
    return 0


def _parse_background(text: str) -> np.ndarray:
    return np.array([float(v) for v in text.split(",")], dtype=np.float64)


def _cmd_render(args) -> int:
    field = load_checkpoint_field(args.checkpoint)
    views = load_cameras(args.cameras, load_images=False)
    view = find_view(views, args.view_id)
    bg = _parse_background(args.background)
    out = render(field, view, bg, tile_size=args.tile_size)

    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    synthetic.save_image_png(f"{prefix}_color.png", out.color)
    _save_depth_png(f"{prefix}_depth.png", out.depth_normalized)
    _save_depth_raw(f"{prefix}_depth.raw", out.depth)
    print(f"rendered view {args.view_id} -> {prefix}_color.png")
    return 0


def _save_depth_png(path, depth: np.ndarray) -> None:
    from PIL import Image

    peak = depth.max()
    scaled = depth / peak if peak > 0 else depth
    data = np.round(scaled * 65535.0).astype(np.uint16)
    Image.fromarray(data).save(path)


def _save_depth_raw(path, depth: np.ndarray) -> None:
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", h, w))
        fh.write(depth.astype("<f4").tobytes())


def load_depth_raw(path) -> np.ndarray:
    with open(path, "rb") as fh:
        h, w = struct.unpack("<II", fh.read(8))
        return np.frombuffer(fh.read(4 * h * w), dtype="<f4").reshape(h, w).copy()


def _cmd_eval(args) -> int:
    field = load_checkpoint_field(args.checkpoint)
    data = Path(args.data)
    cam_file = data / "cameras.json"
    if not cam_file.exists():
        cam_file = data  # allow passing the cameras.json path directly
    views = load_cameras(cam_file)
    bg = _parse_background(args.background)

    per_view = []
    for view in views:
        out = render(field, view, bg, tile_size=args.tile_size)
        rendered, target = out.color, view.image
        if args.masks:
            from PIL import Image

            mask_path = Path(args.masks) / f"mask_{view.view_id:03d}.png"
            with Image.open(mask_path) as im:
                mask = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
            rendered = metrics.apply_mask(rendered, mask)
            target = metrics.apply_mask(target, mask)
        per_view.append(
            {
                "view_id": view.view_id,
                "psnr": metrics.psnr(rendered, target),
                "ssim": metrics.ssim(rendered, target),
            }
        )

    # warm render timing on the first view
    timing_view = views[0]
    for _ in range(3):
        render(field, timing_view, bg, tile_size=args.tile_size)
    start = time.perf_counter()
    for _ in range(100):
        render(field, timing_view, bg, tile_size=args.tile_size)
    fps = 100.0 / (time.perf_counter() - start)

    report = {
        "per_view": per_view,
        "mean_psnr": float(np.mean([v["psnr"] for v in per_view])),
        "mean_ssim": float(np.mean([v["ssim"] for v in per_view])),
        "n_gaussians": len(field),
        "render_fps": fps,
        "lpips": "not reported: requires a pretrained network",
    }
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(report, indent=2))
    print(f"mean_psnr={report['mean_psnr']:.3f} mean_ssim={report['mean_ssim']:.4f} n={len(field)}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
