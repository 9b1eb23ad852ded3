"""Optimization loop: adaptive density control, consistency pruning, and
the edge-aware depth schedule.

Event order when one iteration hits several boundaries: base densify,
opacity reset, consistency prune. The depth-regularization gate is a pure
function of the iteration count.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dc_field, fields, replace
from pathlib import Path

import numpy as np
import torch
from scipy.spatial import cKDTree

from .cameras import CameraView
from .errors import EmptyField, ShapeMismatch
from .field import GaussianField, inverse_sigmoid, quat_to_rotation, rgb_to_sh_dc
from .initializer import PointCloudSeed
from .losses import LossBreakdown, eadr_weight, eadr_with_grad, photometric_with_grad
from .pruning import FeatureStack, compute_prune_mask
from .rasterizer import render, render_backward

TAU_PRESETS = {
    "forward_facing": (0.75, 0.8, 0.85, 0.85),
    "panoramic": (0.6, 0.65, 0.7, 0.8),
}
PRUNE_STEPS_PRESETS = {"forward_facing": 3, "panoramic": 4}

PARAM_GROUPS = ("positions", "rotations", "log_scales", "opacity_logits", "sh_coeffs")


@dataclass
class TrainConfig:
    total_iters: int = 10000
    position_lr_init: float = 0.0016
    position_lr_final: float = 0.000016
    rotation_lr: float = 0.001
    scale_lr: float = 0.005
    opacity_lr: float = 0.05
    sh_lr: float = 0.0025
    lambda_dssim: float = 0.2
    densify_interval: int = 300
    opacity_reset_interval: int = 1000
    densify_grad_threshold: float = 0.0005
    densify_until_iter: int = -1  # -1: resolved to total_iters // 2
    percent_dense: float = 0.01
    prune_steps_total: int = -1  # -1: resolved from preset (3 or 4)
    prune_i_step: int = 3000
    tau_schedule: tuple[float, ...] = ()  # empty: resolved from preset
    level_dims: tuple[int, ...] = (64, 64, 128, 256)
    sh_degree: int = 1
    background: tuple[float, float, float] = (0.5, 0.5, 0.5)
    rng_seed: int = 0
    preset: str = "forward_facing"
    eadr_beta: float = 2.0
    eadr_depth_scale: float = 1.0
    tile_size: int = 16
    compute_dtype: str = "float32"  # render precision during training
    mvc_prune_enabled: bool = True
    eadr_enabled: bool = True
    opacity_prune_floor: float = 0.005
    scale_prune_ratio: float = 0.1
    split_scale_divisor: float = 1.6

    def resolved(self) -> "TrainConfig":
        """Fill preset-dependent defaults and validate."""
        if self.preset not in TAU_PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}")
        cfg = replace(self)
        if cfg.prune_steps_total < 0:
            cfg.prune_steps_total = PRUNE_STEPS_PRESETS[cfg.preset]
        if not cfg.tau_schedule:
            cfg.tau_schedule = TAU_PRESETS[cfg.preset]
        # the preset lists carry up to four thresholds; use the first T
        if len(cfg.tau_schedule) > cfg.prune_steps_total:
            cfg.tau_schedule = tuple(cfg.tau_schedule[: cfg.prune_steps_total])
        if len(cfg.tau_schedule) != cfg.prune_steps_total:
            raise ValueError(
                f"tau schedule has {len(cfg.tau_schedule)} entries for {cfg.prune_steps_total} steps"
            )
        if cfg.densify_until_iter < 0:
            cfg.densify_until_iter = cfg.total_iters // 2
        # zero is allowed so parameter groups can be frozen outright
        for name in ("position_lr_init", "position_lr_final", "rotation_lr", "scale_lr", "opacity_lr", "sh_lr"):
            if getattr(cfg, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        for name in ("densify_interval", "opacity_reset_interval", "prune_i_step"):
            if getattr(cfg, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        return cfg


@dataclass
class TrainState:
    field: GaussianField
    optimizer: torch.optim.Adam
    config: TrainConfig
    scene_extent: float
    iteration: int = 0
    prune_step: int = 0
    view_order: np.ndarray | None = None
    history: list[dict] = dc_field(default_factory=list)
    events: list[dict] = dc_field(default_factory=list)
    view_rng: np.random.Generator = None
    densify_rng: np.random.Generator = None


def position_lr(iteration: int, config: TrainConfig) -> float:
    """Log-linear interpolation between the initial and final position lr."""
    if config.position_lr_init == 0.0 or config.position_lr_final == 0.0:
        return 0.0
    t = min(max(iteration / config.total_iters, 0.0), 1.0)
    return math.exp(
        (1.0 - t) * math.log(config.position_lr_init) + t * math.log(config.position_lr_final)
    )


def scene_extent_from_views(views: list[CameraView]) -> float:
    centers = np.stack([view.camera_center for view in views])
    center = centers.mean(axis=0)
    radius = np.linalg.norm(centers - center, axis=1).max()
    return float(max(radius * 1.1, 1e-3))


def init_state(seed: PointCloudSeed, views: list[CameraView], config: TrainConfig) -> TrainState:
    """Build the optimizable field and its optimizer from a seed cloud."""
    config = config.resolved()
    if len(seed) == 0:
        raise EmptyField("cannot initialize from an empty seed cloud")
    m = len(seed)
    b = (config.sh_degree + 1) ** 2
    extent = scene_extent_from_views(views)

    sh = np.zeros((m, b, 3))
    sh[:, 0, :] = rgb_to_sh_dc(np.clip(seed.colors, 0.0, 1.0))
    if m > 3:
        tree = cKDTree(seed.positions)
        dists, _ = tree.query(seed.positions, k=4)
        nn = np.maximum(dists[:, 1:].mean(axis=1), 1e-7)
    else:
        nn = np.full(m, 0.1 * extent)
    log_scales = np.log(nn)[:, None].repeat(3, axis=1)
    rotations = np.zeros((m, 4))
    rotations[:, 0] = 1.0
    opacity = np.full((m, 1), inverse_sigmoid(0.1))

    field = GaussianField(seed.positions, rotations, log_scales, opacity, sh)
    for t in field.raw_parameters().values():
        t.requires_grad_(True)

    groups = [
        {"params": [field.positions], "lr": config.position_lr_init, "name": "positions"},
        {"params": [field.rotations], "lr": config.rotation_lr, "name": "rotations"},
        {"params": [field.log_scales], "lr": config.scale_lr, "name": "log_scales"},
        {"params": [field.opacity_logits], "lr": config.opacity_lr, "name": "opacity_logits"},
        {"params": [field.sh_coeffs], "lr": config.sh_lr, "name": "sh_coeffs"},
    ]
    optimizer = torch.optim.Adam(groups, lr=0.0, eps=1e-15, betas=(0.9, 0.999))

    seeds = np.random.SeedSequence(config.rng_seed).spawn(2)
    return TrainState(
        field=field,
        optimizer=optimizer,
        config=config,
        scene_extent=extent,
        view_rng=np.random.default_rng(seeds[0]),
        densify_rng=np.random.default_rng(seeds[1]),
    )


def plan_events(iteration: int, config: TrainConfig) -> list[tuple]:
    """Schedule boundaries hit at one iteration, in execution order."""
    events = []
    if iteration > 0:
        if iteration % config.densify_interval == 0 and iteration < config.densify_until_iter:
            events.append(("densify",))
        last_reset = (config.prune_steps_total - 1) * config.prune_i_step
        if iteration % config.opacity_reset_interval == 0 and iteration <= last_reset:
            events.append(("opacity_reset",))
        if config.mvc_prune_enabled and iteration % config.prune_i_step == 0:
            k = iteration // config.prune_i_step
            if 1 <= k <= config.prune_steps_total:
                events.append(("mvc_prune", k, config.tau_schedule[k - 1]))
    return events


def train_step(
    state: TrainState,
    views: list[CameraView],
    features: FeatureStack | None,
    config: TrainConfig | None = None,
) -> LossBreakdown:
    """One optimization iteration plus any schedule events it triggers."""
    cfg = config or state.config
    if len(state.field) == 0:
        raise EmptyField(f"no Gaussians left at iteration {state.iteration}")

    for group in state.optimizer.param_groups:
        if group["name"] == "positions":
            group["lr"] = position_lr(state.iteration, cfg)

    n_views = len(views)
    slot = state.iteration % n_views
    if slot == 0 or state.view_order is None:
        state.view_order = state.view_rng.permutation(n_views)
    view = views[state.view_order[slot]]

    dtype = torch.float32 if cfg.compute_dtype == "float32" else torch.float64
    out = render(
        state.field,
        view,
        cfg.background,
        tile_size=cfg.tile_size,
        record_graph=True,
        compute_dtype=dtype,
    )
    photo, d_color = photometric_with_grad(out.color, view.image, cfg.lambda_dssim, dtype=dtype)
    w_d = eadr_weight(state.iteration, cfg.prune_steps_total, cfg.prune_i_step) if cfg.eadr_enabled else 0
    if w_d:
        scale = cfg.eadr_depth_scale
        eadr_raw, d_scaled = eadr_with_grad(out.depth_normalized * scale, view.image, cfg.eadr_beta, dtype=dtype)
        d_depth = w_d * scale * d_scaled
    else:
        eadr_raw = 0.0
        d_depth = np.zeros_like(out.depth_normalized)

    grads = render_backward(out, d_color, d_depth)
    named = {
        "positions": grads.d_positions,
        "rotations": grads.d_rotations,
        "log_scales": grads.d_log_scales,
        "opacity_logits": grads.d_opacity_logits,
        "sh_coeffs": grads.d_sh,
    }
    raw = state.field.raw_parameters()
    for name, grad in named.items():
        raw[name].grad = torch.from_numpy(grad)
    state.optimizer.step()
    for tensor in raw.values():
        tensor.grad = None

    with torch.no_grad():
        observed = torch.from_numpy(out.rendered)
        state.field.grad_accum[observed] += torch.from_numpy(grads.d_mean2d_norm)[observed]
        state.field.grad_count[observed] += 1.0

    for event in plan_events(state.iteration, cfg):
        if event[0] == "densify":
            densify_and_prune_base(state, cfg)
        elif event[0] == "opacity_reset":
            _reset_opacity(state)
            state.events.append({"iter": state.iteration, "event": "opacity_reset"})
        elif event[0] == "mvc_prune":
            _, k, tau = event
            _run_mvc_prune(state, views, features, k, tau)

    breakdown = LossBreakdown(
        photometric=photo,
        eadr=w_d * eadr_raw,
        total=photo + w_d * eadr_raw,
        eadr_weight=float(w_d),
    )
    state.history.append(
        {
            "iter": state.iteration,
            "photometric": breakdown.photometric,
            "eadr": breakdown.eadr,
            "eadr_weight": breakdown.eadr_weight,
            "total": breakdown.total,
            "n_gaussians": len(state.field),
        }
    )
    state.iteration += 1
    return breakdown


def _run_mvc_prune(state, views, features, k, tau):
    if features is None:
        raise ShapeMismatch("consistency pruning is enabled but no feature stack was provided")
    decision = compute_prune_mask(state.field, views, features, t=k, tau_t=tau, keep_diagnostics=False)
    removed = int(decision.mask.sum())
    if removed:
        _replace_rows(state, keep=~decision.mask, appended={})
    state.prune_step = k
    state.events.append(
        {
            "iter": state.iteration,
            "event": "mvc_prune",
            "t": k,
            "tau": tau,
            "removed": removed,
            "remaining": len(state.field),
        }
    )


def densify_and_prune_base(state: TrainState, config: TrainConfig) -> None:
    """Base adaptive density control: clone small / split large Gaussians
    whose mean accumulated screen-space gradient exceeds the threshold,
    then drop near-transparent and oversized ones."""
    field = state.field
    with torch.no_grad():
        counts = field.grad_count.clamp(min=1.0)
        grads = (field.grad_accum / counts)[:, 0]
        grads[field.grad_count[:, 0] == 0] = 0.0
        max_scale = field.scales().max(dim=1).values
        hot = grads.numpy() >= config.densify_grad_threshold
        small = max_scale.numpy() <= config.percent_dense * state.scene_extent
        clone_mask = hot & small
        split_mask = hot & ~small

        raw = {k: v.detach() for k, v in field.raw_parameters().items()}
        appended = {k: [] for k in PARAM_GROUPS}
        if clone_mask.any():
            for k in PARAM_GROUPS:
                appended[k].append(raw[k][torch.from_numpy(clone_mask)])
        if split_mask.any():
            idx = torch.from_numpy(split_mask).nonzero(as_tuple=True)[0]
            parents_pos = raw["positions"][idx]
            parents_rot = raw["rotations"][idx]
            scales = field.scales().detach()[idx]
            R = quat_to_rotation(parents_rot)
            noise = torch.from_numpy(
                state.densify_rng.normal(size=(2, len(idx), 3))
            )
            for child in range(2):
                offset = (R @ (scales * noise[child]).unsqueeze(-1)).squeeze(-1)
                appended["positions"].append(parents_pos + offset)
                appended["rotations"].append(parents_rot)
                appended["log_scales"].append(
                    torch.log(scales / config.split_scale_divisor)
                )
                appended["opacity_logits"].append(raw["opacity_logits"][idx])
                appended["sh_coeffs"].append(raw["sh_coeffs"][idx])
        keep = ~torch.from_numpy(split_mask)
        new_rows = {
            k: torch.cat(v) if v else torch.empty((0, *raw[k].shape[1:]), dtype=torch.float64)
            for k, v in appended.items()
        }
    _replace_rows(state, keep=keep.numpy(), appended=new_rows)

    # removal pass: transparent survivors, plus oversized ones once the run
    # is past its first opacity-reset interval (initial scales are allowed
    # to be coarse while coverage is still sparse)
    with torch.no_grad():
        field = state.field
        opac = field.opacities()[:, 0].numpy()
        drop = opac < config.opacity_prune_floor
        if state.iteration > config.opacity_reset_interval:
            max_scale = field.scales().max(dim=1).values.numpy()
            drop |= max_scale > config.scale_prune_ratio * state.scene_extent
    if drop.any():
        _replace_rows(state, keep=~drop, appended={})
    with torch.no_grad():
        m = len(state.field)
        state.field.grad_accum = torch.zeros(m, 1, dtype=torch.float64)
        state.field.grad_count = torch.zeros(m, 1, dtype=torch.float64)
    state.events.append(
        {"iter": state.iteration, "event": "densify", "remaining": len(state.field)}
    )


def _reset_opacity(state: TrainState) -> None:
    """Reset opacity logits to logit(0.01) and clear their moments."""
    with torch.no_grad():
        new_value = torch.full_like(state.field.opacity_logits, inverse_sigmoid(0.01))
    for group in state.optimizer.param_groups:
        if group["name"] != "opacity_logits":
            continue
        old = group["params"][0]
        new_param = new_value.requires_grad_(True)
        stored = state.optimizer.state.pop(old, None)
        if stored is not None:
            stored["exp_avg"] = torch.zeros_like(new_param)
            stored["exp_avg_sq"] = torch.zeros_like(new_param)
            state.optimizer.state[new_param] = stored
        group["params"][0] = new_param
        state.field.opacity_logits = new_param


def _replace_rows(state: TrainState, keep: np.ndarray, appended: dict) -> None:
    """Compact rows by a keep mask and append new rows, keeping every
    optimizer moment buffer aligned with the field."""
    keep_t = torch.from_numpy(np.asarray(keep, dtype=bool))
    field = state.field
    raw = field.raw_parameters()
    for group in state.optimizer.param_groups:
        name = group["name"]
        old = group["params"][0]
        with torch.no_grad():
            value = raw[name].detach()[keep_t]
            extra = appended.get(name)
            if extra is not None and len(extra):
                value = torch.cat([value, extra.to(torch.float64)])
        new_param = value.clone().requires_grad_(True)
        stored = state.optimizer.state.pop(old, None)
        if stored is not None:
            n_new = new_param.shape[0] - int(keep_t.sum())
            for key in ("exp_avg", "exp_avg_sq"):
                buf = stored[key][keep_t]
                if n_new:
                    buf = torch.cat([buf, torch.zeros(n_new, *buf.shape[1:], dtype=buf.dtype)])
                stored[key] = buf
            state.optimizer.state[new_param] = stored
        group["params"][0] = new_param
        setattr(field, name, new_param)
    with torch.no_grad():
        field.grad_accum = field.grad_accum[keep_t]
        field.grad_count = field.grad_count[keep_t]
        n_new = len(field) - int(keep_t.sum())
        if n_new:
            field.grad_accum = torch.cat([field.grad_accum, torch.zeros(n_new, 1, dtype=torch.float64)])
            field.grad_count = torch.cat([field.grad_count, torch.zeros(n_new, 1, dtype=torch.float64)])


def train(
    state: TrainState,
    views: list[CameraView],
    features: FeatureStack | None,
    log_path=None,
    log_every: int = 1,
) -> TrainState:
    """Run the configured number of iterations from the state's position."""
    cfg = state.config
    while state.iteration < cfg.total_iters:
        train_step(state, views, features, cfg)
    if log_path is not None:
        write_loss_csv(state.history, log_path, every=log_every)
    return state


def write_loss_csv(history: list[dict], path, every: int = 1) -> None:
    lines = ["iter,photometric,eadr,eadr_weight,total,n_gaussians"]
    for row in history:
        if row["iter"] % every and row["iter"] != history[-1]["iter"]:
            continue
        lines.append(
            f"{row['iter']},{row['photometric']:.10g},{row['eadr']:.10g},"
            f"{row['eadr_weight']:g},{row['total']:.10g},{row['n_gaussians']}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


# ----------------------------------------------------------------------
# Checkpoints: PLY + sidecar JSON naming the optimizer-moment blob.
# ----------------------------------------------------------------------

def save_checkpoint(state: TrainState, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    state.field.save_ply(directory / "point_cloud.ply")
    moments = {}
    for group in state.optimizer.param_groups:
        stored = state.optimizer.state.get(group["params"][0])
        if stored is not None:
            moments[group["name"]] = {
                "step": stored["step"],
                "exp_avg": stored["exp_avg"],
                "exp_avg_sq": stored["exp_avg_sq"],
            }
    torch.save(moments, directory / "optimizer.pt")
    meta = {
        "iteration": state.iteration,
        "prune_step": state.prune_step,
        "n_gaussians": len(state.field),
        "sh_degree": state.field.sh_degree,
        "optimizer_blob": "optimizer.pt",
    }
    (directory / "checkpoint.json").write_text(json.dumps(meta, indent=2))
    return directory / "point_cloud.ply"


def load_checkpoint_field(path) -> GaussianField:
    """Load the field from a checkpoint directory or a bare PLY path."""
    path = Path(path)
    if path.is_dir():
        path = path / "point_cloud.ply"
    return GaussianField.load_ply(path)


def config_from_file(path) -> dict:
    """Parse a flat `key = value` config file into override kwargs."""
    overrides: dict = {}
    valid = {f.name: f for f in fields(TrainConfig)}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"malformed config line: {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in valid:
            raise ValueError(f"unknown config key {key!r}")
        overrides[key] = _parse_config_value(key, value)
    return overrides


def _parse_config_value(key: str, value: str):
    if key in ("tau_schedule",):
        return tuple(float(v) for v in value.split(",") if v.strip())
    if key in ("level_dims",):
        return tuple(int(v) for v in value.split(",") if v.strip())
    if key in ("background",):
        parts = [float(v) for v in value.split(",") if v.strip()]
        return tuple(parts)
    if key in ("preset", "compute_dtype"):
        return value
    if key in ("mvc_prune_enabled", "eadr_enabled"):
        return value.lower() in ("1", "true", "yes", "on")
    if key in (
        "total_iters", "densify_interval", "opacity_reset_interval", "densify_until_iter",
        "prune_steps_total", "prune_i_step", "sh_degree", "rng_seed", "tile_size",
    ):
        return int(value)
    return float(value)
