"""Seed point cloud construction.

Pipeline: triangulate correspondence midpoints, optionally drop
statistical outliers, then append uniform random points restricted to
voxels that no matched point occupies.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .cameras import CameraView, Ray, find_view, pixel_ray
from .errors import DegenerateBox, InsufficientVisibility, OutOfBounds
from .ply import read_ply, write_ply

SOURCE_MATCHED = 0
SOURCE_FILLED = 1

# Rays closer to parallel than this sine are rejected as degenerate.
MIN_RAY_SINE = 1e-4


@dataclass(frozen=True)
class Correspondence:
    view_s: int
    view_t: int
    pixel_s: tuple[float, float]
    pixel_t: tuple[float, float]
    confidence: float = 1.0


@dataclass
class CorrespondenceSet:
    pairs: list[Correspondence]

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass
class PointCloudSeed:
    positions: np.ndarray  # (P,3)
    colors: np.ndarray  # (P,3) in [0,1]
    source: np.ndarray  # (P,) uint8, 0=matched 1=filled

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        self.source = np.asarray(self.source, dtype=np.uint8).reshape(-1)
        if not (len(self.positions) == len(self.colors) == len(self.source)):
            raise ValueError("seed arrays disagree on point count")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("non-finite seed positions")

    def __len__(self) -> int:
        return len(self.positions)


def triangulate_midpoint(ray_s: Ray, ray_t: Ray) -> tuple[np.ndarray, bool]:
    """Midpoint of the closest points between two rays.

    Invalid (second return False) when the rays are near-parallel or
    either closest-point parameter is negative.
    """
    b = float(ray_s.direction @ ray_t.direction)
    denom = 1.0 - b * b  # == sin^2 of the angle between unit directions
    if denom < MIN_RAY_SINE ** 2:
        return np.zeros(3), False
    w0 = ray_s.origin - ray_t.origin
    d = float(ray_s.direction @ w0)
    e = float(ray_t.direction @ w0)
    t_s = (b * e - d) / denom
    t_t = (e - b * d) / denom
    if t_s < 0.0 or t_t < 0.0:
        return np.zeros(3), False
    x_s = ray_s.origin + t_s * ray_s.direction
    x_t = ray_t.origin + t_t * ray_t.direction
    return 0.5 * (x_s + x_t), True


def sample_bilinear(image: np.ndarray, u: float, v: float) -> np.ndarray:
    """Bilinear image sample with pixel centers at integer coordinates."""
    h, w = image.shape[:2]
    if not (0.0 <= u <= w - 1 and 0.0 <= v <= h - 1):
        raise OutOfBounds(f"sample ({u:.4g}, {v:.4g}) outside image")
    x0 = int(np.floor(u))
    y0 = int(np.floor(v))
    x1 = min(x0 + 1, w - 1)
    y1 = min(y0 + 1, h - 1)
    tx = u - x0
    ty = v - y0
    top = (1 - tx) * image[y0, x0] + tx * image[y0, x1]
    bot = (1 - tx) * image[y1, x0] + tx * image[y1, x1]
    return (1 - ty) * top + ty * bot


def build_seed_cloud(matches: CorrespondenceSet, views: list[CameraView]) -> PointCloudSeed:
    """Triangulate every valid correspondence into a Matched seed point."""
    by_id = {view.view_id: view for view in views}
    positions = []
    colors = []
    for m in matches.pairs:
        view_s = by_id.get(m.view_s) or find_view(views, m.view_s)
        view_t = by_id.get(m.view_t) or find_view(views, m.view_t)
        ray_s = pixel_ray(view_s, m.pixel_s)
        ray_t = pixel_ray(view_t, m.pixel_t)
        p_mid, valid = triangulate_midpoint(ray_s, ray_t)
        if not valid:
            continue
        c_s = sample_bilinear(view_s.image, *m.pixel_s)
        c_t = sample_bilinear(view_t.image, *m.pixel_t)
        positions.append(p_mid)
        colors.append(0.5 * (c_s + c_t))
    n = len(positions)
    return PointCloudSeed(
        positions=np.array(positions).reshape(n, 3),
        colors=np.array(colors).reshape(n, 3),
        source=np.full(n, SOURCE_MATCHED, dtype=np.uint8),
    )


def filter_outliers(cloud: PointCloudSeed, k: int = 8, std_ratio: float = 2.0) -> PointCloudSeed:
    """Statistical outlier removal on mean k-NN distance.

    Points whose mean distance to their k nearest neighbors exceeds
    (mean + std_ratio * std) of that statistic are dropped. Filled points
    are exempt. Clouds with <= k points pass through unchanged.
    """
    if k < 1 or std_ratio <= 0:
        raise ValueError("k must be >= 1 and std_ratio positive")
    if len(cloud) <= k:
        return cloud
    tree = cKDTree(cloud.positions)
    dists, _ = tree.query(cloud.positions, k=k + 1)  # first neighbor is the point itself
    mean_dist = dists[:, 1:].mean(axis=1)
    threshold = mean_dist.mean() + std_ratio * mean_dist.std()
    keep = (mean_dist <= threshold) | (cloud.source == SOURCE_FILLED)
    return PointCloudSeed(cloud.positions[keep], cloud.colors[keep], cloud.source[keep])


def voxel_indices(points: np.ndarray, b_min: np.ndarray, voxel_size: np.ndarray, resolution: int) -> np.ndarray:
    idx = np.floor((points - b_min) / voxel_size).astype(np.int64)
    return np.clip(idx, 0, resolution - 1)


def random_fill(
    cloud: PointCloudSeed,
    b_min,
    b_max,
    n_fill: int,
    resolution: int = 32,
    rng_seed: int = 0,
) -> PointCloudSeed:
    """Append uniform random points, skipping voxels with Matched points.

    Draws n_fill candidates inside [b_min, b_max]; candidates landing in a
    voxel already occupied by a Matched point are discarded, so the number
    appended is at most n_fill. Appended points get random colors and the
    Filled source tag.
    """
    b_min = np.asarray(b_min, dtype=np.float64).reshape(3)
    b_max = np.asarray(b_max, dtype=np.float64).reshape(3)
    if np.any(b_max - b_min <= 0):
        raise DegenerateBox(f"box extents {b_max - b_min} must be positive")
    if resolution < 1 or n_fill < 0:
        raise ValueError("resolution must be >= 1 and n_fill nonnegative")

    voxel_size = (b_max - b_min) / resolution
    occupied: set[tuple[int, int, int]] = set()
    matched = cloud.positions[cloud.source == SOURCE_MATCHED]
    if len(matched):
        for idx in voxel_indices(matched, b_min, voxel_size, resolution):
            occupied.add(tuple(idx))

    rng = np.random.default_rng(rng_seed)
    candidates = rng.uniform(b_min, b_max, size=(n_fill, 3))
    colors = rng.uniform(0.0, 1.0, size=(n_fill, 3))
    if n_fill == 0:
        return cloud
    cand_vox = voxel_indices(candidates, b_min, voxel_size, resolution)
    keep = np.array([tuple(idx) not in occupied for idx in cand_vox], dtype=bool)
    return PointCloudSeed(
        positions=np.concatenate([cloud.positions, candidates[keep]]),
        colors=np.concatenate([cloud.colors, colors[keep]]),
        source=np.concatenate([cloud.source, np.full(keep.sum(), SOURCE_FILLED, dtype=np.uint8)]),
    )


def default_bounding_box(cloud: PointCloudSeed, dilation: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Axis-aligned box of the Matched points, dilated per side."""
    matched = cloud.positions[cloud.source == SOURCE_MATCHED]
    if len(matched) == 0:
        raise DegenerateBox("no matched points to bound")
    b_min = matched.min(axis=0)
    b_max = matched.max(axis=0)
    extent = np.maximum(b_max - b_min, 1e-6)
    return b_min - dilation * extent, b_max + dilation * extent


def generate_matches(
    scene,
    views: list[CameraView],
    n_matches: int,
    pixel_noise_std: float = 0.0,
    rng_seed: int = 0,
) -> CorrespondenceSet:
    """Oracle correspondences from a synthetic scene's surface samples.

    Samples surface points visible in at least two of the given views,
    projects them exactly into two randomly chosen visible views, and
    perturbs the pixels with Gaussian noise (clamped to the image).
    """
    from .cameras import project_point

    ids = {view.view_id for view in views}
    usable = [
        s for s in scene.surface_samples if len(set(s.visible_views) & ids) >= 2
    ]
    if not usable:
        raise InsufficientVisibility("no surface sample is visible in >= 2 views")
    by_id = {view.view_id: view for view in views}
    rng = np.random.default_rng(rng_seed)
    pairs = []
    for _ in range(n_matches):
        sample = usable[rng.integers(len(usable))]
        vis = sorted(set(sample.visible_views) & ids)
        i, j = rng.choice(len(vis), size=2, replace=False)
        vs, vt = by_id[vis[i]], by_id[vis[j]]
        us, vs_pix, _ = project_point(sample.position, vs)
        ut, vt_pix, _ = project_point(sample.position, vt)
        if pixel_noise_std > 0:
            noise = rng.normal(0.0, pixel_noise_std, size=4)
            us, vs_pix = us + noise[0], vs_pix + noise[1]
            ut, vt_pix = ut + noise[2], vt_pix + noise[3]
        us = float(np.clip(us, 0, vs.width - 1))
        vs_pix = float(np.clip(vs_pix, 0, vs.height - 1))
        ut = float(np.clip(ut, 0, vt.width - 1))
        vt_pix = float(np.clip(vt_pix, 0, vt.height - 1))
        pairs.append(Correspondence(vs.view_id, vt.view_id, (us, vs_pix), (ut, vt_pix), 1.0))
    return CorrespondenceSet(pairs)


# ----------------------------------------------------------------------
# File formats
# ----------------------------------------------------------------------

def save_matches(path, matches: CorrespondenceSet) -> None:
    """Text format: one `view_s view_t u_s v_s u_t v_t confidence` per line."""
    lines = []
    for m in matches.pairs:
        lines.append(
            f"{m.view_s} {m.view_t} {m.pixel_s[0]!r} {m.pixel_s[1]!r} "
            f"{m.pixel_t[0]!r} {m.pixel_t[1]!r} {m.confidence!r}"
        )
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_matches(path) -> CorrespondenceSet:
    pairs = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 7:
            raise ValueError(f"malformed correspondence line: {line!r}")
        pairs.append(
            Correspondence(
                view_s=int(parts[0]),
                view_t=int(parts[1]),
                pixel_s=(float(parts[2]), float(parts[3])),
                pixel_t=(float(parts[4]), float(parts[5])),
                confidence=float(parts[6]),
            )
        )
    return CorrespondenceSet(pairs)


def save_seed_ply(path, cloud: PointCloudSeed) -> None:
    dtype = np.dtype(
        [(n, "<f8") for n in ("x", "y", "z", "red", "green", "blue")] + [("source", "u1")]
    )
    rows = np.empty(len(cloud), dtype=dtype)
    for i, n in enumerate(("x", "y", "z")):
        rows[n] = cloud.positions[:, i]
    for i, n in enumerate(("red", "green", "blue")):
        rows[n] = cloud.colors[:, i]
    rows["source"] = cloud.source
    write_ply(path, rows)


def load_seed_ply(path) -> PointCloudSeed:
    rows = read_ply(path)
    positions = np.stack([rows["x"], rows["y"], rows["z"]], axis=1).astype(np.float64)
    colors = np.stack([rows["red"], rows["green"], rows["blue"]], axis=1).astype(np.float64)
    return PointCloudSeed(positions, colors, rows["source"].astype(np.uint8))
