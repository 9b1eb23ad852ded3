"""Differentiable splat rendering: color, depth, and accumulated alpha.

Forward semantics per pixel, with Gaussians sorted front-to-back by
camera-frame depth (ties broken by primitive index):

  alpha_hat_i = opacity_i * G2D_i(p), clamped to <= 0.99
  color(p)    = sum_i c_i * alpha_hat_i * prod_{j<i} (1 - alpha_hat_j)
  depth(p)    = sum_i d_i * (same weights),  d_i = ||mu_i - cam_center||_2

Gaussians with alpha_hat < 1/255 are skipped; compositing stops once the
transmittance falls below 1e-4. The backward pass replays the recorded
forward graph, so it sees exactly the same traversal order and culling
decisions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np
import torch

from .cameras import CameraView, Z_NEAR
from .errors import BehindCamera, ForwardStateMissing, ShapeMismatch
from .field import GaussianField, build_covariances, eval_sh, sh_to_color

ALPHA_CLAMP = 0.99
ALPHA_SKIP = 1.0 / 255.0
T_MIN = 1e-4
LOWPASS = 0.3
# Footprint cutoff: beyond this many sigmas the unclamped alpha is < 1/255,
# so bbox culling is exactly equivalent to the per-splat skip test.
CUTOFF_SIGMA = math.sqrt(2.0 * math.log(255.0))
# Alpha below which normalized depth is defined as 0.
ALPHA_EPS = 1e-4


@dataclass
class SplatGradients:
    """Gradients of the seeded render loss w.r.t. raw field parameters."""

    d_positions: np.ndarray
    d_rotations: np.ndarray
    d_log_scales: np.ndarray
    d_opacity_logits: np.ndarray
    d_sh: np.ndarray
    d_mean2d_norm: np.ndarray  # (M,1), half-image-extent units


class _RenderGraph:
    """Recorded forward state consumed by exactly one backward call."""

    def __init__(self, leaves, color, depth_normalized, means2d, front_idx, view, n_gaussians, n_bands):
        self.leaves = leaves
        self.color = color
        self.depth_normalized = depth_normalized
        self.means2d = means2d
        self.front_idx = front_idx
        self.view = view
        self.n_gaussians = n_gaussians
        self.n_bands = n_bands
        self.consumed = False


@dataclass
class RenderOutput:
    color: np.ndarray  # (H,W,3) in [0,1]
    depth: np.ndarray  # (H,W) raw composited depth
    depth_normalized: np.ndarray  # (H,W), depth/alpha where alpha > 1e-4
    alpha: np.ndarray  # (H,W) accumulated opacity
    contrib_count: np.ndarray  # (H,W) int32, Gaussians blended per pixel
    rendered: np.ndarray  # (M,) bool, Gaussians that reached compositing
    _graph: _RenderGraph | None = dc_field(default=None, repr=False)


def project_covariance(sigma, mu, view: CameraView) -> np.ndarray:
    """EWA projection of a world covariance to a 2x2 image covariance.

    Sigma' = J W Sigma W^T J^T + 0.3 I, with W the world-to-camera
    rotation and J the perspective Jacobian at mu. Raises BehindCamera
    when mu has camera depth <= Z_NEAR.
    """
    sigma = np.asarray(sigma, dtype=np.float64).reshape(3, 3)
    p = view.rotation @ np.asarray(mu, dtype=np.float64).reshape(3) + view.translation
    x, y, z = p
    if z <= Z_NEAR:
        raise BehindCamera(f"mean at camera depth {z:.3g}")
    J = np.array(
        [
            [view.fx / z, 0.0, -view.fx * x / (z * z)],
            [0.0, view.fy / z, -view.fy * y / (z * z)],
        ]
    )
    JW = J @ view.rotation
    return JW @ sigma @ JW.T + LOWPASS * np.eye(2)


def render(
    field: GaussianField,
    view: CameraView,
    background,
    tile_size: int | None = 16,
    record_graph: bool = False,
    compute_dtype: torch.dtype = torch.float64,
) -> RenderOutput:
    """Render a view. tile_size=None selects the untiled per-pixel path.

    With record_graph=True the forward graph is retained on the output so
    render_backward can replay it. compute_dtype=float32 trades precision
    for speed; parameter gradients come back in the field's own dtype.
    """
    H, W = view.height, view.width
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    m = len(field)

    grad_mode = torch.enable_grad() if record_graph else torch.no_grad()
    if record_graph:
        for t in field.raw_parameters().values():
            t.requires_grad_(True)

    with grad_mode:
        out = _render_torch(
            field, view, torch.from_numpy(bg).to(compute_dtype), tile_size, m, H, W, compute_dtype
        )

    if out is None:  # nothing in front of the camera
        return _background_output(field, view, bg, record_graph)

    color_t, depth_t, depthn_t, alpha_t, count_t, means2d, front_idx, rendered_idx = out
    rendered = np.zeros(m, dtype=bool)
    rendered[rendered_idx.numpy()] = True
    graph = None
    if record_graph:
        graph = _RenderGraph(
            field.raw_parameters(), color_t, depthn_t, means2d, front_idx, view, m,
            field.sh_coeffs.shape[1],
        )
    return RenderOutput(
        color=color_t.detach().numpy().astype(np.float64),
        depth=depth_t.detach().numpy().astype(np.float64),
        depth_normalized=depthn_t.detach().numpy().astype(np.float64),
        alpha=alpha_t.detach().numpy().astype(np.float64),
        contrib_count=count_t.detach().numpy().astype(np.int32),
        rendered=rendered,
        _graph=graph,
    )


def _background_output(field, view, bg, record_graph) -> RenderOutput:
    H, W = view.height, view.width
    graph = None
    if record_graph:
        graph = _RenderGraph(field.raw_parameters(), None, None, None, None, view,
                             len(field), field.sh_coeffs.shape[1])
    return RenderOutput(
        color=np.broadcast_to(bg, (H, W, 3)).copy(),
        depth=np.zeros((H, W)),
        depth_normalized=np.zeros((H, W)),
        alpha=np.zeros((H, W)),
        contrib_count=np.zeros((H, W), dtype=np.int32),
        rendered=np.zeros(len(field), dtype=bool),
        _graph=graph,
    )


def _render_torch(field, view, bg, tile_size, m, H, W, dtype):
    if m == 0:
        return None
    R = torch.from_numpy(view.rotation.copy()).to(dtype)
    t = torch.from_numpy(view.translation.copy()).to(dtype)
    cam_center = torch.from_numpy(view.camera_center).to(dtype)

    positions = field.positions.to(dtype)
    p_cam = positions @ R.T + t
    front = p_cam[:, 2] > Z_NEAR
    front_idx = front.nonzero(as_tuple=True)[0]
    if front_idx.numel() == 0:
        return None

    pc = p_cam[front_idx]
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    u = view.fx * x / z + view.cx
    v = view.fy * y / z + view.cy
    means2d = torch.stack([u, v], dim=1)

    cov3 = build_covariances(
        field.rotations[front_idx].to(dtype), field.scales()[front_idx].to(dtype)
    )
    # Perspective Jacobian rows stacked into (F,2,3), already composed with R.
    zero = torch.zeros_like(z)
    J = torch.stack(
        [
            torch.stack([view.fx / z, zero, -view.fx * x / (z * z)], dim=1),
            torch.stack([zero, view.fy / z, -view.fy * y / (z * z)], dim=1),
        ],
        dim=1,
    )
    JW = J @ R
    cov2 = JW @ cov3 @ JW.transpose(1, 2)
    a = cov2[:, 0, 0] + LOWPASS
    b = cov2[:, 0, 1]
    c = cov2[:, 1, 1] + LOWPASS
    det = a * c - b * b
    inv_a, inv_b, inv_c = c / det, -b / det, a / det

    opac_all = field.opacities()[front_idx][:, 0].to(dtype)
    with torch.no_grad():
        lam_max = 0.5 * (a + c) + torch.sqrt(torch.clamp(0.25 * (a - c) ** 2 + b * b, min=0.0))
        # Beyond q_max the splat alpha is below the 1/255 skip threshold, so
        # the opacity-aware radius culls exactly the pairs the skip would.
        q_max = 2.0 * torch.log(torch.clamp(255.0 * opac_all.detach(), min=1e-12))
        radius = torch.sqrt(torch.clamp(q_max, min=0.0) * lam_max)
        ud, vd = u.detach(), v.detach()
        visible = (
            (q_max > 0.0)
            & (ud + radius >= 0.0)
            & (ud - radius <= W - 1.0)
            & (vd + radius >= 0.0)
            & (vd - radius <= H - 1.0)
        )
    vis_idx = visible.nonzero(as_tuple=True)[0]
    if vis_idx.numel() == 0:
        return None

    # Front-to-back order by camera z, stable so ties keep primitive index order.
    order = torch.argsort(z[vis_idx].detach(), stable=True)
    sel = vis_idx[order]
    rendered_idx = front_idx[sel]

    dirs = positions[rendered_idx] - cam_center
    dirs = dirs / torch.linalg.norm(dirs, dim=1, keepdim=True)
    colors = torch.clamp(
        eval_sh(field.sh_coeffs[rendered_idx].to(dtype), dirs, field.sh_degree), 0.0, 1.0
    )
    dists = torch.linalg.norm(positions[rendered_idx] - cam_center, dim=1)
    opac = opac_all[sel]
    # Compositing reads the projected means through means2d so its gradient
    # is exactly the screen-space position gradient.
    su, sv = means2d[sel, 0], means2d[sel, 1]
    sia, sib, sic = inv_a[sel], inv_b[sel], inv_c[sel]
    s_radius = radius[sel]

    px = torch.arange(W, dtype=dtype)
    py = torch.arange(H, dtype=dtype)

    if tile_size is None:
        tiles = [(0, H, 0, W)]
    else:
        tiles = [
            (y0, min(y0 + tile_size, H), x0, min(x0 + tile_size, W))
            for y0 in range(0, H, tile_size)
            for x0 in range(0, W, tile_size)
        ]

    rows: dict[int, list] = {}
    for y0, y1, x0, x1 in tiles:
        if tile_size is None:
            sub = torch.arange(su.shape[0])
        else:
            with torch.no_grad():
                sud, svd = su.detach(), sv.detach()
                overlap = (
                    (sud + s_radius >= float(x0))
                    & (sud - s_radius <= float(x1 - 1))
                    & (svd + s_radius >= float(y0))
                    & (svd - s_radius <= float(y1 - 1))
                )
            sub = overlap.nonzero(as_tuple=True)[0]
        block = _composite_block(
            su, sv, sia, sib, sic, opac, colors, dists, sub, px[x0:x1], py[y0:y1], bg
        )
        rows.setdefault(y0, []).append(block)

    row_tensors = [
        tuple(torch.cat([blk[i] for blk in rows[y0]], dim=1) for i in range(5))
        for y0 in sorted(rows)
    ]
    color = torch.cat([r[0] for r in row_tensors], dim=0)
    depth = torch.cat([r[1] for r in row_tensors], dim=0)
    alpha = torch.cat([r[2] for r in row_tensors], dim=0)
    count = torch.cat([r[3] for r in row_tensors], dim=0)
    depthn = torch.cat([r[4] for r in row_tensors], dim=0)
    return color, depth, depthn, alpha, count, means2d, front_idx, rendered_idx


# Gaussians are blended in depth chunks; once every pixel of a block is
# saturated (transmittance < T_MIN) the remaining chunks are provably dead
# and can be skipped without changing the result.
COMPOSITE_CHUNK = 128


def _composite_block(su, sv, sia, sib, sic, opac, colors, dists, sub, px, py, bg):
    th, tw = py.shape[0], px.shape[0]
    dtype = su.dtype
    if sub.numel() == 0:
        color = bg.to(dtype).expand(th, tw, 3).clone()
        zeros = torch.zeros(th, tw, dtype=dtype)
        return color, zeros, zeros.clone(), zeros.clone(), zeros.clone()

    gx, gy = torch.meshgrid(px, py, indexing="xy")
    fx = gx.reshape(-1)
    fy = gy.reshape(-1)
    n_px = fx.shape[0]

    alpha = torch.zeros(n_px, dtype=dtype)
    color_acc = torch.zeros(n_px, 3, dtype=dtype)
    depth = torch.zeros(n_px, dtype=dtype)
    count = torch.zeros(n_px, dtype=torch.int64)
    carry = torch.ones(1, n_px, dtype=dtype)
    needs_clamp = bool(opac.detach().max() > ALPHA_CLAMP)

    for lo in range(0, sub.numel(), COMPOSITE_CHUNK):
        chunk = sub[lo : lo + COMPOSITE_CHUNK]
        dx = fx.unsqueeze(0) - su[chunk].unsqueeze(1)  # (G,P)
        dy = fy.unsqueeze(0) - sv[chunk].unsqueeze(1)
        q = dx * (sia[chunk].unsqueeze(1) * dx + 2.0 * sib[chunk].unsqueeze(1) * dy) + sic[chunk].unsqueeze(1) * dy * dy
        ah = opac[chunk].unsqueeze(1) * torch.exp(-0.5 * q)
        if needs_clamp:
            ah = torch.clamp(ah, max=ALPHA_CLAMP)
        keep = ah.detach() >= ALPHA_SKIP
        if not bool(keep.all()):
            ah = ah * keep.to(dtype)
        trans = carry * torch.cumprod(1.0 - ah, dim=0)
        t_before = torch.cat([carry, trans[:-1]], dim=0)
        w = ah * t_before
        # pixels whose transmittance already fell below the floor stop blending
        if float(trans[-1].detach().min()) < T_MIN:
            live = (t_before.detach() >= T_MIN).to(dtype)
            w = w * live
        alpha = alpha + w.sum(dim=0)
        color_acc = color_acc + w.T @ colors[chunk]
        depth = depth + (w * dists[chunk].unsqueeze(1)).sum(dim=0)
        count = count + (w.detach() > 0).sum(dim=0)
        carry = trans[-1:]
        if float(carry.detach().max()) < T_MIN:
            break

    color = color_acc + (1.0 - alpha).unsqueeze(1) * bg.to(dtype)
    mask = alpha.detach() > ALPHA_EPS
    depthn = torch.where(mask, depth / torch.clamp(alpha, min=1e-12), torch.zeros_like(depth))
    return (
        color.reshape(th, tw, 3),
        depth.reshape(th, tw),
        alpha.reshape(th, tw),
        count.reshape(th, tw).to(dtype),
        depthn.reshape(th, tw),
    )


def render_backward(output: RenderOutput, d_color, d_depth) -> SplatGradients:
    """Gradients of sum(d_color*color + d_depth*depth_normalized).

    Requires the output of a render(..., record_graph=True) call; each
    recorded forward pass can be consumed once.
    """
    g = output._graph
    if g is None or g.consumed:
        raise ForwardStateMissing("no recorded forward pass to differentiate")
    g.consumed = True
    m, b = g.n_gaussians, g.n_bands
    view = g.view
    d_color = np.asarray(d_color, dtype=np.float64)
    d_depth = np.asarray(d_depth, dtype=np.float64)
    if d_color.shape != (view.height, view.width, 3) or d_depth.shape != (view.height, view.width):
        raise ShapeMismatch("gradient seeds do not match the rendered image size")

    zeros = _zero_gradients(m, b)
    if g.color is None:  # every Gaussian was culled
        return zeros

    leaves = [g.leaves[k] for k in ("positions", "rotations", "log_scales", "opacity_logits", "sh_coeffs")]
    outputs = [g.color]
    seeds = [torch.from_numpy(d_color).to(g.color.dtype)]
    if d_depth.any():
        outputs.append(g.depth_normalized)
        seeds.append(torch.from_numpy(d_depth).to(g.color.dtype))
    grads = torch.autograd.grad(
        outputs=outputs,
        inputs=leaves + [g.means2d],
        grad_outputs=seeds,
        allow_unused=True,
    )
    arrays = [
        gr.detach().numpy() if gr is not None else np.zeros(tuple(leaf.shape))
        for gr, leaf in zip(grads[:5], leaves)
    ]
    d_mean2d = np.zeros((m, 2))
    if grads[5] is not None:
        d_mean2d[g.front_idx.numpy()] = grads[5].detach().numpy()
    # Half-image-extent units, the convention the densify threshold assumes.
    d_mean2d_norm = np.linalg.norm(
        d_mean2d * np.array([view.width / 2.0, view.height / 2.0]), axis=1, keepdims=True
    )
    return SplatGradients(*arrays, d_mean2d_norm=d_mean2d_norm)


def _zero_gradients(m: int, b: int) -> SplatGradients:
    return SplatGradients(
        d_positions=np.zeros((m, 3)),
        d_rotations=np.zeros((m, 4)),
        d_log_scales=np.zeros((m, 3)),
        d_opacity_logits=np.zeros((m, 1)),
        d_sh=np.zeros((m, b, 3)),
        d_mean2d_norm=np.zeros((m, 1)),
    )


# ----------------------------------------------------------------------
# Brute-force reference renderer: per-pixel loop, no tiling, no early
# termination, full precision. Used as the compositing oracle in tests
# and by the synthetic-scene generator.
# ----------------------------------------------------------------------

def reference_render(field: GaussianField, view: CameraView, background) -> RenderOutput:
    H, W = view.height, view.width
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    m = len(field)

    pos = field.positions.detach().numpy()
    quats = field.rotations.detach().numpy()
    scales = field.scales().detach().numpy()
    opac = field.opacities().detach().numpy()[:, 0]
    sh = field.sh_coeffs.detach().numpy()
    degree = field.sh_degree
    cam = view.camera_center

    means = []
    for j in range(m):
        p = view.rotation @ pos[j] + view.translation
        if p[2] <= Z_NEAR:
            continue
        qn = quats[j] / np.linalg.norm(quats[j])
        w_, x_, y_, z_ = qn
        R3 = np.array(
            [
                [1 - 2 * (y_ * y_ + z_ * z_), 2 * (x_ * y_ - w_ * z_), 2 * (x_ * z_ + w_ * y_)],
                [2 * (x_ * y_ + w_ * z_), 1 - 2 * (x_ * x_ + z_ * z_), 2 * (y_ * z_ - w_ * x_)],
                [2 * (x_ * z_ - w_ * y_), 2 * (y_ * z_ + w_ * x_), 1 - 2 * (x_ * x_ + y_ * y_)],
            ]
        )
        S = np.diag(scales[j])
        cov3 = R3 @ S @ S.T @ R3.T
        x, y, z = p
        J = np.array(
            [
                [view.fx / z, 0.0, -view.fx * x / (z * z)],
                [0.0, view.fy / z, -view.fy * y / (z * z)],
            ]
        )
        JW = J @ view.rotation
        cov2 = JW @ cov3 @ JW.T + LOWPASS * np.eye(2)
        det = cov2[0, 0] * cov2[1, 1] - cov2[0, 1] ** 2
        inv = np.array([[cov2[1, 1], -cov2[0, 1]], [-cov2[0, 1], cov2[0, 0]]]) / det
        d = np.linalg.norm(pos[j] - cam)
        direction = (pos[j] - cam) / d
        col = np.clip(sh_to_color(sh[j], direction, degree), 0.0, 1.0)
        u = view.fx * x / z + view.cx
        v = view.fy * y / z + view.cy
        means.append((z, j, u, v, inv, opac[j], col, d))

    means.sort(key=lambda rec: (rec[0], rec[1]))
    color = np.tile(bg, (H, W, 1))
    depth = np.zeros((H, W))
    alpha = np.zeros((H, W))
    count = np.zeros((H, W), dtype=np.int32)
    rendered = np.zeros(m, dtype=bool)
    if means:
        us = np.array([rec[2] for rec in means])
        vs = np.array([rec[3] for rec in means])
        ia = np.array([rec[4][0, 0] for rec in means])
        ib = np.array([rec[4][0, 1] for rec in means])
        ic = np.array([rec[4][1, 1] for rec in means])
        op = np.array([rec[5] for rec in means])
        cols = np.array([rec[6] for rec in means])
        ds = np.array([rec[7] for rec in means])
        rendered[[rec[1] for rec in means]] = True
        for row in range(H):
            for col_px in range(W):
                dx = col_px - us
                dy = row - vs
                q = ia * dx * dx + 2 * ib * dx * dy + ic * dy * dy
                ah = np.minimum(op * np.exp(-0.5 * q), ALPHA_CLAMP)
                contrib = np.nonzero(ah >= ALPHA_SKIP)[0]
                trans = 1.0
                acc = np.zeros(3)
                acc_d = 0.0
                acc_a = 0.0
                for i in contrib:
                    weight = ah[i] * trans
                    acc += weight * cols[i]
                    acc_d += weight * ds[i]
                    acc_a += weight
                    trans *= 1.0 - ah[i]
                color[row, col_px] = acc + trans * bg
                depth[row, col_px] = acc_d
                alpha[row, col_px] = acc_a
                count[row, col_px] = len(contrib)
    depth_normalized = np.where(alpha > ALPHA_EPS, depth / np.maximum(alpha, 1e-12), 0.0)
    return RenderOutput(
        color=color,
        depth=depth,
        depth_normalized=depth_normalized,
        alpha=alpha,
        contrib_count=count,
        rendered=rendered,
    )
