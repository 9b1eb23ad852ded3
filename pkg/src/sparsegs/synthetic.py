"""Ground-truth scene generation for closed-loop pipeline tests.

Scenes are small Gaussian fields with known parameters; view images come
from the brute-force reference renderer, and every surface sample is the
mean of a generating Gaussian, so triangulation and pruning can be
checked against exact geometry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from PIL import Image

from .cameras import CameraView, project_points, save_cameras
from .field import GaussianField, inverse_sigmoid, rgb_to_sh_dc
from .initializer import CorrespondenceSet, save_matches
from .rasterizer import reference_render

PRESETS = ("cluster", "plane", "shell")
CAMERA_RADIUS = 4.0
DEFAULT_FOV_DEG = 45.0


@dataclass(frozen=True)
class SurfaceSample:
    position: np.ndarray
    color: np.ndarray
    visible_views: tuple[int, ...]


@dataclass
class SyntheticScene:
    preset: str
    gt_field: GaussianField
    views: list[CameraView]
    heldout_views: list[CameraView]
    surface_samples: list[SurfaceSample]
    background: np.ndarray
    bbox: tuple[np.ndarray, np.ndarray] = dc_field(default=None)

    @property
    def diameter(self) -> float:
        lo, hi = self.bbox
        return float(np.linalg.norm(hi - lo))


def _look_at(position: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera rotation and translation for a camera at position."""
    z_axis = target - position
    z_axis = z_axis / np.linalg.norm(z_axis)
    up = np.array([0.0, 1.0, 0.0])
    if abs(z_axis @ up) > 0.999:
        up = np.array([0.0, 0.0, 1.0])
    x_axis = np.cross(up, z_axis)
    x_axis = x_axis / np.linalg.norm(x_axis)
    y_axis = np.cross(z_axis, x_axis)
    R = np.stack([x_axis, y_axis, z_axis], axis=0)
    return R, -R @ position


def _camera_positions(preset: str, count: int, offset: float) -> np.ndarray:
    """Deterministic camera placement; offset in (0,1) interleaves held-out views."""
    if preset in ("cluster", "plane"):
        # forward-facing arc in the xz-plane; wide enough that triangulation
        # from adjacent views stays well-conditioned
        span = math.radians(110.0)
        angles = [(-span / 2) + span * (i + offset) / count for i in range(count)]
        return np.array(
            [
                [CAMERA_RADIUS * math.sin(a), 0.6, -CAMERA_RADIUS * math.cos(a)]
                for a in angles
            ]
        )
    # panoramic ring with alternating elevation
    positions = []
    for i in range(count):
        theta = 2 * math.pi * (i + offset) / count
        phi = math.radians(25.0 if i % 2 == 0 else -20.0)
        positions.append(
            [
                CAMERA_RADIUS * math.cos(phi) * math.sin(theta),
                CAMERA_RADIUS * math.sin(phi),
                -CAMERA_RADIUS * math.cos(phi) * math.cos(theta),
            ]
        )
    return np.array(positions)


def _build_views(preset, count, image_size, first_id, offset) -> list[CameraView]:
    h, w = image_size
    focal = 0.5 * w / math.tan(math.radians(DEFAULT_FOV_DEG) / 2)
    views = []
    for i, pos in enumerate(_camera_positions(preset, count, offset)):
        R, t = _look_at(pos, np.zeros(3))
        views.append(
            CameraView(
                view_id=first_id + i,
                fx=focal,
                fy=focal,
                cx=(w - 1) / 2.0,
                cy=(h - 1) / 2.0,
                rotation=R,
                translation=t,
                width=w,
                height=h,
            )
        )
    return views


def _sample_positions(preset: str, n: int, rng: np.random.Generator) -> np.ndarray:
    if preset == "cluster":
        return rng.normal(0.0, 0.5, size=(n, 3))
    if preset == "plane":
        pts = np.zeros((n, 3))
        pts[:, 0] = rng.uniform(-1.0, 1.0, size=n)
        pts[:, 1] = rng.uniform(-1.0, 1.0, size=n)
        pts[:, 2] = rng.normal(0.0, 0.02, size=n)
        return pts
    if preset == "shell":
        raw = rng.normal(size=(n, 3))
        return raw / np.linalg.norm(raw, axis=1, keepdims=True)
    raise ValueError(f"unknown preset {preset!r}")


def make_scene(
    preset: str,
    n_gaussians: int = 100,
    n_views: int = 8,
    image_size: tuple[int, int] = (64, 64),
    rng_seed: int = 0,
    background=(0.5, 0.5, 0.5),
) -> SyntheticScene:
    """Deterministic scene with train views and interleaved held-out views."""
    if preset not in PRESETS:
        raise ValueError(f"preset must be one of {PRESETS}")
    if n_gaussians < 1 or n_views < 2:
        raise ValueError("need at least 1 Gaussian and 2 views")
    rng = np.random.default_rng(rng_seed)

    positions = _sample_positions(preset, n_gaussians, rng)
    colors = rng.uniform(0.15, 0.95, size=(n_gaussians, 3))
    sh = np.zeros((n_gaussians, 4, 3))
    sh[:, 0, :] = rgb_to_sh_dc(colors)
    log_scales = np.log(rng.uniform(0.05, 0.15, size=(n_gaussians, 3)))
    quats = rng.normal(size=(n_gaussians, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    opacities = np.array(
        [inverse_sigmoid(a) for a in rng.uniform(0.55, 0.9, size=n_gaussians)]
    ).reshape(-1, 1)
    gt_field = GaussianField(positions, quats, log_scales, opacities, sh)

    views = _build_views(preset, n_views, image_size, first_id=0, offset=0.25)
    heldout = _build_views(preset, n_views, image_size, first_id=n_views, offset=0.75)

    bg = np.asarray(background, dtype=np.float64).reshape(3)
    rendered_views = []
    for view in views:
        out = reference_render(gt_field, view, bg)
        rendered_views.append(_with_image(view, out.color))
    rendered_heldout = []
    for view in heldout:
        out = reference_render(gt_field, view, bg)
        rendered_heldout.append(_with_image(view, out.color))

    samples = []
    for j in range(n_gaussians):
        visible = []
        for view in rendered_views:
            uv, _, ok = project_points(positions[j : j + 1], view)
            if ok[0] and 0 <= uv[0, 0] <= view.width - 1 and 0 <= uv[0, 1] <= view.height - 1:
                visible.append(view.view_id)
        samples.append(
            SurfaceSample(position=positions[j].copy(), color=colors[j].copy(), visible_views=tuple(visible))
        )

    lo = positions.min(axis=0)
    hi = positions.max(axis=0)
    return SyntheticScene(
        preset=preset,
        gt_field=gt_field,
        views=rendered_views,
        heldout_views=rendered_heldout,
        surface_samples=samples,
        background=bg,
        bbox=(lo, hi),
    )


def _with_image(view: CameraView, image: np.ndarray) -> CameraView:
    return CameraView(
        view_id=view.view_id,
        fx=view.fx,
        fy=view.fy,
        cx=view.cx,
        cy=view.cy,
        rotation=view.rotation,
        translation=view.translation,
        width=view.width,
        height=view.height,
        image=np.clip(image, 0.0, 1.0),
    )


def save_image_png(path, image: np.ndarray) -> None:
    data = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path)


def write_dataset(scene: SyntheticScene, root, matches: CorrespondenceSet) -> None:
    """Emit the dataset directory the CLI ingests.

    Layout: cameras.json, images/, matches.txt, gt.ply and a heldout/
    subdirectory with its own cameras.json and images.
    """
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "heldout" / "images").mkdir(parents=True, exist_ok=True)

    paths = {}
    for view in scene.views:
        rel = f"images/view_{view.view_id:03d}.png"
        save_image_png(root / rel, view.image)
        paths[view.view_id] = rel
    save_cameras(root / "cameras.json", scene.views, paths)

    held_paths = {}
    for view in scene.heldout_views:
        rel = f"images/view_{view.view_id:03d}.png"
        save_image_png(root / "heldout" / rel, view.image)
        held_paths[view.view_id] = rel
    save_cameras(root / "heldout" / "cameras.json", scene.heldout_views, held_paths)

    save_matches(root / "matches.txt", matches)
    scene.gt_field.save_ply(root / "gt.ply")
