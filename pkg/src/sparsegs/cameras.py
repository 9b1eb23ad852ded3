"""Pinhole camera model, point projection, and pixel-ray generation.

Conventions used throughout the package:
  - world-to-camera transform: x_cam = R @ x_world + t
  - (u, v) indexes (column, row), origin at the top-left corner
  - pixel centers sit at integer coordinates, so the valid image domain
    is [0, W-1] x [0, H-1]
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BehindCamera, OutOfBounds, UnknownView

# Minimum camera-frame depth; guards the perspective divide.
Z_NEAR = 1e-6


@dataclass(frozen=True)
class CameraView:
    """A posed, calibrated input view. Immutable after construction."""

    view_id: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # (3,3) world-to-camera
    translation: np.ndarray  # (3,)
    width: int
    height: int
    image: np.ndarray | None = field(default=None, repr=False)  # (H,W,3) in [0,1]

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        R = self.rotation
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9):
            raise ValueError(f"view {self.view_id}: rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError(f"view {self.view_id}: rotation determinant != 1")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"view {self.view_id}: focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"view {self.view_id}: degenerate image size")
        if self.image is not None:
            img = np.asarray(self.image, dtype=np.float64)
            if img.shape != (self.height, self.width, 3):
                raise ValueError(f"view {self.view_id}: image shape {img.shape} does not match size")
            if img.min() < 0.0 or img.max() > 1.0:
                raise ValueError(f"view {self.view_id}: image values outside [0,1]")
            img.setflags(write=False)
            object.__setattr__(self, "image", img)
        self.rotation.setflags(write=False)
        self.translation.setflags(write=False)

    @property
    def camera_center(self) -> np.ndarray:
        """Camera origin in world coordinates, -R^T t."""
        return -self.rotation.T @ self.translation

    @property
    def intrinsics(self) -> np.ndarray:
        K = np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])
        return K


@dataclass(frozen=True)
class Ray:
    """World-space ray with unit direction."""

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(3))
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        object.__setattr__(self, "direction", d)
        self.origin.setflags(write=False)
        self.direction.setflags(write=False)


def project_point(mu, view: CameraView) -> tuple[float, float, float]:
    """Perspective-project a world point into a view.

    Returns (u, v, z) where z is the camera-frame depth used as the
    divisor. Raises BehindCamera when z <= Z_NEAR.
    """
    p = view.rotation @ np.asarray(mu, dtype=np.float64).reshape(3) + view.translation
    z = p[2]
    if z <= Z_NEAR:
        raise BehindCamera(f"point at camera depth {z:.3g}")
    u = view.fx * p[0] / z + view.cx
    v = view.fy * p[1] / z + view.cy
    return float(u), float(v), float(z)


def project_points(mus: np.ndarray, view: CameraView) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized projection of an (M,3) array.

    Returns (uv (M,2), z (M,), valid (M,) bool). Points with z <= Z_NEAR
    are flagged invalid instead of raising; their uv entries are
    meaningless.
    """
    mus = np.asarray(mus, dtype=np.float64).reshape(-1, 3)
    p = mus @ view.rotation.T + view.translation
    z = p[:, 2]
    valid = z > Z_NEAR
    zs = np.where(valid, z, 1.0)
    uv = np.stack(
        [view.fx * p[:, 0] / zs + view.cx, view.fy * p[:, 1] / zs + view.cy], axis=1
    )
    return uv, z, valid


def pixel_ray(view: CameraView, pixel) -> Ray:
    """Back-project a pixel to a world-space ray through the camera center."""
    u, v = float(pixel[0]), float(pixel[1])
    if not (0 <= u < view.width and 0 <= v < view.height):
        raise OutOfBounds(f"pixel ({u:.4g}, {v:.4g}) outside {view.width}x{view.height} image")
    d_cam = np.array([(u - view.cx) / view.fx, (v - view.cy) / view.fy, 1.0])
    d_world = view.rotation.T @ d_cam
    d_world /= np.linalg.norm(d_world)
    return Ray(origin=view.camera_center, direction=d_world)


def find_view(views: list[CameraView], view_id: int) -> CameraView:
    for view in views:
        if view.view_id == view_id:
            return view
    raise UnknownView(f"view id {view_id} not present")


def save_cameras(path, views: list[CameraView], image_paths: dict[int, str]) -> None:
    """Write the camera JSON file. image_paths maps view_id -> relative path."""
    records = []
    for view in views:
        records.append(
            {
                "view_id": view.view_id,
                "fx": view.fx,
                "fy": view.fy,
                "cx": view.cx,
                "cy": view.cy,
                "rotation": [float(x) for x in view.rotation.reshape(-1)],
                "translation": [float(x) for x in view.translation],
                "width": view.width,
                "height": view.height,
                "image_path": image_paths[view.view_id],
            }
        )
    Path(path).write_text(json.dumps(records, indent=2))


def load_cameras(path, load_images: bool = True) -> list[CameraView]:
    """Read a camera JSON file; image paths are resolved relative to it."""
    path = Path(path)
    records = json.loads(path.read_text())
    views = []
    for rec in records:
        image = None
        if load_images and rec.get("image_path"):
            from PIL import Image

            img_path = path.parent / rec["image_path"]
            with Image.open(img_path) as im:
                image = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        views.append(
            CameraView(
                view_id=int(rec["view_id"]),
                fx=float(rec["fx"]),
                fy=float(rec["fy"]),
                cx=float(rec["cx"]),
                cy=float(rec["cy"]),
                rotation=np.array(rec["rotation"], dtype=np.float64).reshape(3, 3),
                translation=np.array(rec["translation"], dtype=np.float64),
                width=int(rec["width"]),
                height=int(rec["height"]),
                image=image,
            )
        )
    return views
