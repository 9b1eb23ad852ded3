import numpy as np
import pytest
import torch

from sparsegs.cameras import CameraView
from sparsegs.errors import BehindCamera, ForwardStateMissing
from sparsegs.field import GaussianField, inverse_sigmoid, rgb_to_sh_dc
from sparsegs.rasterizer import (
    LOWPASS,
    project_covariance,
    reference_render,
    render,
    render_backward,
)

from conftest import identity_view, random_field


def on_axis_field(z_values, opacities, colors, scale=0.3):
    """Gaussians stacked on the optical axis; at the projected center the
    splat alpha equals the activated opacity exactly."""
    m = len(z_values)
    positions = np.array([[0.0, 0.0, z] for z in z_values])
    quats = np.tile([1.0, 0, 0, 0], (m, 1))
    log_scales = np.full((m, 3), np.log(scale))
    logits = np.array([[inverse_sigmoid(min(a, 1 - 1e-18)) if a < 1 else 40.0] for a in opacities])
    sh = np.zeros((m, 1, 3))
    sh[:, 0, :] = rgb_to_sh_dc(np.asarray(colors, dtype=np.float64))
    return GaussianField(positions, quats, log_scales, logits, sh)


def center_pixel_view(width=8, height=8, fx=30.0):
    # integer principal point so the on-axis projection lands on a pixel center
    return CameraView(view_id=0, fx=fx, fy=fx, cx=width // 2, cy=height // 2,
                      rotation=np.eye(3), translation=np.zeros(3), width=width, height=height)


class TestProjectCovariance:
    def test_lowpass_floor_dominates_tiny_covariance(self):
        view = identity_view()
        sigma2 = project_covariance(1e-12 * np.eye(3), (0.2, -0.1, 2.0), view)
        assert np.allclose(sigma2, LOWPASS * np.eye(2), atol=1e-10)

    def test_on_axis_isotropic_oracle(self):
        # symbolic Jacobian at the optical axis: J = diag(f/z, f/z) row block
        f, z, s = 50.0, 2.5, 0.04
        view = identity_view(fx=f, fy=f, width=64, height=64, translation=(0, 0, 0))
        sigma2 = project_covariance(s ** 2 * np.eye(3), (0, 0, z), view)
        expected = (f ** 2 * s ** 2 / z ** 2 + LOWPASS) * np.eye(2)
        assert np.allclose(sigma2, expected, atol=1e-12)

    def test_doubling_depth_quarters_prefloor(self):
        f, s = 50.0, 0.04
        view = identity_view(fx=f, fy=f, width=64, height=64, translation=(0, 0, 0))
        near = project_covariance(s ** 2 * np.eye(3), (0, 0, 2.0), view) - LOWPASS * np.eye(2)
        far = project_covariance(s ** 2 * np.eye(3), (0, 0, 4.0), view) - LOWPASS * np.eye(2)
        assert np.allclose(far, near / 4.0, atol=1e-12)

    def test_behind_camera(self):
        with pytest.raises(BehindCamera):
            project_covariance(np.eye(3), (0, 0, -1.0), identity_view(translation=(0, 0, 0)))

    def test_eigenvalue_floor(self):
        rng = np.random.default_rng(0)
        view = identity_view()
        for _ in range(100):
            a = rng.normal(size=(3, 3))
            sigma = a @ a.T + 1e-6 * np.eye(3)
            mu = rng.normal([0, 0, 2.5], 0.3)
            eigs = np.linalg.eigvalsh(project_covariance(sigma, mu, view))
            assert eigs.min() >= LOWPASS - 1e-9


class TestRenderForward:
    def test_empty_field_renders_background(self):
        field = GaussianField(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)),
                              np.zeros((0, 1)), np.zeros((0, 1, 3)))
        out = render(field, identity_view(), (0, 0, 0))
        assert np.array_equal(out.color, np.zeros_like(out.color))
        assert not out.alpha.any() and not out.depth.any()

    def test_single_gaussian_center_pixel(self):
        field = on_axis_field([1.0], [0.8], [[1.0, 0.0, 0.0]])
        view = center_pixel_view()
        out = render(field, view, (0, 0, 0))
        cx, cy = int(view.cx), int(view.cy)
        assert np.allclose(out.color[cy, cx], [0.8, 0, 0], atol=1e-12)
        assert out.alpha[cy, cx] == pytest.approx(0.8, abs=1e-12)

    def test_two_gaussian_hand_composite(self):
        # front alpha 0.5 red at distance 1, back alpha 0.8 blue at distance 2
        field = on_axis_field([1.0, 2.0], [0.5, 0.8], [[1, 0, 0], [0, 0, 1]], scale=0.5)
        view = center_pixel_view()
        out = render(field, view, (0, 0, 0))
        cx, cy = int(view.cx), int(view.cy)
        # hand-composited: w1 = 0.5, w2 = 0.5*0.8 = 0.4
        assert np.allclose(out.color[cy, cx], [0.5, 0, 0.4], atol=1e-12)
        assert out.alpha[cy, cx] == pytest.approx(0.9, abs=1e-12)
        assert out.depth[cy, cx] == pytest.approx(0.5 * 1.0 + 0.4 * 2.0, abs=1e-12)
        assert out.depth_normalized[cy, cx] == pytest.approx(1.3 / 0.9, abs=1e-9)
        assert out.contrib_count[cy, cx] == 2

    def test_saturated_alpha_clamps(self):
        # a raw opacity of 1.0 clamps to 0.99 before blending
        field = on_axis_field([1.0, 2.0], [0.5, 1.0], [[1, 0, 0], [0, 0, 1]], scale=0.5)
        view = center_pixel_view()
        out = render(field, view, (0, 0, 0))
        cx, cy = int(view.cx), int(view.cy)
        assert np.allclose(out.color[cy, cx], [0.5, 0, 0.5 * 0.99], atol=1e-12)
        assert out.depth[cy, cx] == pytest.approx(0.5 + 0.5 * 0.99 * 2.0, abs=1e-12)

    def test_background_compositing(self):
        field = on_axis_field([1.0], [0.6], [[1.0, 0.0, 0.0]])
        view = center_pixel_view()
        out = render(field, view, (0.0, 1.0, 0.0))
        cx, cy = int(view.cx), int(view.cy)
        assert np.allclose(out.color[cy, cx], [0.6, 0.4, 0.0], atol=1e-12)

    def test_order_invariance(self):
        rng = np.random.default_rng(1)
        field = random_field(rng, 30)
        view = identity_view()
        out = render(field, view, (0.1, 0.2, 0.3))
        perm = rng.permutation(30)
        shuffled = GaussianField(
            field.positions[perm], field.rotations[perm], field.log_scales[perm],
            field.opacity_logits[perm], field.sh_coeffs[perm],
        )
        out2 = render(shuffled, view, (0.1, 0.2, 0.3))
        assert np.allclose(out.color, out2.color, atol=1e-12)
        assert np.allclose(out.depth, out2.depth, atol=1e-12)

    def test_weights_sum_matches_alpha(self):
        rng = np.random.default_rng(2)
        field = random_field(rng, 50)
        out = render(field, identity_view(), (0, 0, 0))
        assert (out.alpha >= 0).all() and (out.alpha <= 1.0).all()
        # color of a white field equals the weight sum, so alpha is the weight sum
        white = GaussianField(field.positions, field.rotations, field.log_scales,
                              field.opacity_logits,
                              np.tile(rgb_to_sh_dc(np.ones(3)), (50, 1, 1)))
        out_w = render(white, identity_view(), (0, 0, 0))
        assert np.allclose(out_w.color[..., 0], out_w.alpha, atol=1e-9)

    def test_depth_equals_normalized_times_alpha(self):
        rng = np.random.default_rng(3)
        field = random_field(rng, 40)
        out = render(field, identity_view(), (0, 0, 0))
        covered = out.alpha > 1e-4
        assert np.allclose(out.depth[covered], (out.depth_normalized * out.alpha)[covered], atol=1e-5)
        assert (out.depth_normalized[~covered] == 0).all()

    def test_tiled_matches_per_pixel(self):
        rng = np.random.default_rng(4)
        for trial in range(5):
            field = random_field(rng, int(rng.integers(5, 80)))
            view = identity_view(width=40, height=24, cx=rng.uniform(10, 30), cy=rng.uniform(5, 15))
            bg = rng.uniform(0, 1, 3)
            tiled = render(field, view, bg, tile_size=16)
            flat = render(field, view, bg, tile_size=None)
            assert np.abs(tiled.color - flat.color).max() < 1e-4
            assert np.abs(tiled.alpha - flat.alpha).max() < 1e-4
            assert np.array_equal(tiled.contrib_count, flat.contrib_count)

    def test_matches_reference_renderer(self):
        rng = np.random.default_rng(5)
        for trial in range(5):
            field = random_field(rng, int(rng.integers(10, 100)), opacity_range=(0.05, 0.95))
            view = identity_view(width=24, height=24)
            bg = rng.uniform(0, 1, 3)
            ref = reference_render(field, view, bg)
            for tile in (16, None):
                out = render(field, view, bg, tile_size=tile)
                assert np.abs(out.color - ref.color).max() < 1e-4
                assert np.abs(out.alpha - ref.alpha).max() < 1e-4

    def test_float32_close_to_reference(self):
        rng = np.random.default_rng(6)
        field = random_field(rng, 60)
        view = identity_view(width=24, height=24)
        ref = reference_render(field, view, (0.3, 0.3, 0.3))
        out = render(field, view, (0.3, 0.3, 0.3), compute_dtype=torch.float32)
        assert np.abs(out.color - ref.color).max() < 1e-4

    def test_render_is_deterministic(self):
        rng = np.random.default_rng(7)
        field = random_field(rng, 40)
        view = identity_view()
        a = render(field, view, (0, 0, 0))
        b = render(field, view, (0, 0, 0))
        assert np.array_equal(a.color, b.color)


class TestRenderBackward:
    def test_zero_seed_gives_zero_gradients(self):
        rng = np.random.default_rng(8)
        field = random_field(rng, 10)
        view = identity_view()
        out = render(field, view, (0, 0, 0), record_graph=True)
        g = render_backward(out, np.zeros((32, 32, 3)), np.zeros((32, 32)))
        for arr in (g.d_positions, g.d_rotations, g.d_log_scales, g.d_opacity_logits, g.d_sh, g.d_mean2d_norm):
            assert not arr.any()

    def test_requires_recorded_forward(self):
        rng = np.random.default_rng(9)
        field = random_field(rng, 5)
        out = render(field, identity_view(), (0, 0, 0))
        with pytest.raises(ForwardStateMissing):
            render_backward(out, np.zeros((32, 32, 3)), np.zeros((32, 32)))

    def test_graph_consumed_once(self):
        rng = np.random.default_rng(10)
        field = random_field(rng, 5)
        out = render(field, identity_view(), (0, 0, 0), record_graph=True)
        render_backward(out, np.zeros((32, 32, 3)), np.zeros((32, 32)))
        with pytest.raises(ForwardStateMissing):
            render_backward(out, np.zeros((32, 32, 3)), np.zeros((32, 32)))

    def test_culled_gaussian_gets_zero_gradient(self):
        rng = np.random.default_rng(11)
        field = random_field(rng, 6)
        with torch.no_grad():
            field.positions[2] = torch.tensor([0.0, 0.0, -50.0])  # far behind the camera
        view = identity_view()
        out = render(field, view, (0, 0, 0), record_graph=True)
        assert not out.rendered[2]
        g = render_backward(out, rng.normal(size=(32, 32, 3)), rng.normal(size=(32, 32)))
        assert not g.d_positions[2].any()
        assert not g.d_sh[2].any()
        assert g.d_mean2d_norm[2] == 0.0

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(12)
        field = random_field(rng, 4, scale_range=(0.15, 0.4), position_std=0.3)
        view = identity_view(width=8, height=8, fx=10.0)
        d_color = rng.normal(size=(8, 8, 3))
        d_depth = 0.1 * rng.normal(size=(8, 8))

        out = render(field, view, (0.2, 0.1, 0.3), record_graph=True)
        g = render_backward(out, d_color, d_depth)

        def loss_value():
            o = render(field, view, (0.2, 0.1, 0.3))
            return float((d_color * o.color).sum() + (d_depth * o.depth_normalized).sum())

        h = 1e-5
        analytic = {"positions": g.d_positions, "rotations": g.d_rotations,
                    "log_scales": g.d_log_scales, "opacity_logits": g.d_opacity_logits,
                    "sh_coeffs": g.d_sh}
        for name, tensor in field.raw_parameters().items():
            arr = tensor.detach().numpy()
            flat = arr.reshape(-1)
            idx = rng.choice(flat.size, size=min(10, flat.size), replace=False)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                plus = loss_value()
                flat[i] = orig - h
                minus = loss_value()
                flat[i] = orig
                fd = (plus - minus) / (2 * h)
                an = analytic[name].reshape(-1)[i]
                assert an == pytest.approx(fd, rel=1e-3, abs=1e-6), f"{name}[{i}]"
