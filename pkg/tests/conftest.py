import numpy as np
import pytest
import torch

from sparsegs.cameras import CameraView
from sparsegs.field import GaussianField, inverse_sigmoid, rgb_to_sh_dc
from sparsegs.synthetic import make_scene

torch.set_num_threads(1)


def random_field(rng, m, sh_degree=1, opacity_range=(0.3, 0.85), scale_range=(0.05, 0.2),
                 position_std=0.4) -> GaussianField:
    b = (sh_degree + 1) ** 2
    positions = rng.normal(0, position_std, (m, 3))
    quats = rng.normal(size=(m, 4))
    log_scales = np.log(rng.uniform(*scale_range, (m, 3)))
    opacity = np.array([inverse_sigmoid(a) for a in rng.uniform(*opacity_range, m)]).reshape(-1, 1)
    sh = np.zeros((m, b, 3))
    sh[:, 0, :] = rgb_to_sh_dc(rng.uniform(0.2, 0.8, (m, 3)))
    if b > 1:
        sh[:, 1:, :] = rng.normal(0, 0.05, (m, b - 1, 3))
    return GaussianField(positions, quats, log_scales, opacity, sh)


def identity_view(view_id=0, fx=40.0, fy=40.0, cx=None, cy=None, width=32, height=32,
                  translation=(0.0, 0.0, 3.0), image=None) -> CameraView:
    if cx is None:
        cx = (width - 1) / 2.0
    if cy is None:
        cy = (height - 1) / 2.0
    return CameraView(
        view_id=view_id, fx=fx, fy=fy, cx=cx, cy=cy,
        rotation=np.eye(3), translation=np.array(translation, dtype=np.float64),
        width=width, height=height, image=image,
    )


def orbit_view(view_id, angle, radius=3.0, fx=40.0, width=32, height=32, elevation=0.2) -> CameraView:
    """Camera on a horizontal orbit looking at the origin."""
    pos = np.array([radius * np.sin(angle), elevation, -radius * np.cos(angle)])
    z_axis = -pos / np.linalg.norm(pos)
    up = np.array([0.0, 1.0, 0.0])
    x_axis = np.cross(up, z_axis)
    x_axis /= np.linalg.norm(x_axis)
    y_axis = np.cross(z_axis, x_axis)
    R = np.stack([x_axis, y_axis, z_axis])
    return CameraView(
        view_id=view_id, fx=fx, fy=fx, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
        rotation=R, translation=-R @ pos, width=width, height=height,
    )


@pytest.fixture(scope="session")
def cluster_scene():
    return make_scene("cluster", n_gaussians=40, n_views=4, image_size=(48, 48), rng_seed=5)


@pytest.fixture(scope="session")
def cluster_scene_default():
    # the default-scale forward-facing scene used by frozen regressions
    return make_scene("cluster", n_gaussians=100, n_views=8, image_size=(64, 64), rng_seed=0)


@pytest.fixture(scope="session")
def shell_scene_small():
    return make_scene("shell", n_gaussians=60, n_views=6, image_size=(48, 48), rng_seed=9)
