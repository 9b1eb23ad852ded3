"""Multi-view-consistency-guided progressive pruning.

A Gaussian is pruned at step t when, for every pair of views in which its
center projects to a valid pixel, the cosine similarity of the level-masked
feature queries falls below the step threshold tau(t). Gaussians visible in
fewer than two views are never pruned.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .cameras import CameraView, project_points
from .errors import EmptyImage, FeatureViewMismatch, InvalidStep, SizeMismatch
from .field import GaussianField

FEATURE_MAGIC = b"MCFS"
FEATURE_VERSION = 1


@dataclass
class FeatureStack:
    """Per-view feature maps (K,H,W) sharing one level layout.

    Levels are concatenated lowest (finest) first; level_dims[l] gives the
    channel count contributed by level l+1.
    """

    level_dims: tuple[int, ...]
    maps: dict[int, np.ndarray]  # view_id -> (K,H,W) float32

    def __post_init__(self):
        self.level_dims = tuple(int(k) for k in self.level_dims)
        k = sum(self.level_dims)
        for view_id, fmap in self.maps.items():
            if fmap.ndim != 3 or fmap.shape[0] != k:
                raise FeatureViewMismatch(
                    f"view {view_id}: feature shape {fmap.shape} incompatible with K={k}"
                )

    @property
    def total_dims(self) -> int:
        return sum(self.level_dims)


@dataclass
class PruneDecision:
    mask: np.ndarray  # (M,) bool, True = prune
    valid_view_count: np.ndarray  # (M,) int
    pairwise_sims: np.ndarray | None = None  # (M, n_pairs), NaN for invalid pairs


def _bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear upsample of (h,w) or (h,w,c), pixel centers at integers."""
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = np.linspace(0.0, h - 1.0, out_h) if out_h > 1 else np.zeros(1)
    xs = np.linspace(0.0, w - 1.0, out_w) if out_w > 1 else np.zeros(1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    ty = (ys - y0)[:, None]
    tx = (xs - x0)[None, :]
    if img.ndim == 3:
        ty = ty[..., None]
        tx = tx[..., None]
    top = (1 - tx) * img[np.ix_(y0, x0)] + tx * img[np.ix_(y0, x1)]
    bot = (1 - tx) * img[np.ix_(y1, x0)] + tx * img[np.ix_(y1, x1)]
    return (1 - ty) * top + ty * bot


def pyramid_features(image: np.ndarray, level_dims) -> np.ndarray:
    """Deterministic multi-level feature map for one (H,W,3) image.

    Level l blurs the image at sigma = 2^(l-1), subsamples with the same
    stride, augments with gradient channels, replicates to the requested
    channel count, upsamples back to pixel scale, and L2-normalizes per
    pixel. Levels concatenate lowest first.

    Color channels are centered on mid-gray so featureless regions give a
    zero response (and hence zero similarity), mimicking a DC-free
    backbone; the gradient channels are zero on constant images.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] < 1 or image.shape[1] < 1:
        raise EmptyImage(f"image shape {image.shape}")
    level_dims = tuple(int(k) for k in level_dims)
    if not level_dims:
        raise ValueError("level_dims must be non-empty")
    h, w = image.shape[:2]
    levels = []
    for l, k_l in enumerate(level_dims, start=1):
        sigma = 2.0 ** (l - 1)
        stride = int(2 ** (l - 1))
        blurred = np.stack(
            [ndimage.gaussian_filter(image[..., c], sigma, mode="nearest") for c in range(3)],
            axis=-1,
        )
        gx = np.zeros((h, w))
        gy = np.zeros((h, w))
        gx[:, :-1] = np.diff(blurred, axis=1).mean(axis=2)
        gy[:-1, :] = np.diff(blurred, axis=0).mean(axis=2)
        gmag = np.sqrt(gx * gx + gy * gy)
        basis = np.concatenate(
            [blurred - 0.5, gx[..., None], gy[..., None], gmag[..., None]], axis=2
        )
        small = basis[::stride, ::stride]
        up = _bilinear_resize(small, h, w)
        reps = [up[..., i % basis.shape[2]] for i in range(k_l)]
        feat = np.stack(reps, axis=0)  # (K_l, H, W)
        norm = np.sqrt((feat ** 2).sum(axis=0, keepdims=True))
        feat = np.where(norm > 1e-12, feat / np.maximum(norm, 1e-12), 0.0)
        levels.append(feat)
    return np.concatenate(levels, axis=0).astype(np.float32)


def build_feature_stack(views: list[CameraView], level_dims) -> FeatureStack:
    maps = {view.view_id: pyramid_features(view.image, level_dims) for view in views}
    return FeatureStack(level_dims=tuple(level_dims), maps=maps)


def query_feature(fmap: np.ndarray, p2d) -> np.ndarray | None:
    """Bilinear feature sample at (u,v); None when outside [0,W-1]x[0,H-1]."""
    u, v = float(p2d[0]), float(p2d[1])
    k, h, w = fmap.shape
    if not (0.0 <= u <= w - 1 and 0.0 <= v <= h - 1):
        return None
    x0, y0 = int(np.floor(u)), int(np.floor(v))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    tx, ty = u - x0, v - y0
    top = (1 - tx) * fmap[:, y0, x0] + tx * fmap[:, y0, x1]
    bot = (1 - tx) * fmap[:, y1, x0] + tx * fmap[:, y1, x1]
    return ((1 - ty) * top + ty * bot).astype(np.float64)


def _query_features_batch(fmap: np.ndarray, uv: np.ndarray, valid: np.ndarray):
    """Vectorized bilinear queries; returns (M,K) features and validity."""
    k, h, w = fmap.shape
    u, v = uv[:, 0], uv[:, 1]
    ok = valid & (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    uc = np.where(ok, u, 0.0)
    vc = np.where(ok, v, 0.0)
    x0 = np.floor(uc).astype(int)
    y0 = np.floor(vc).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    tx = (uc - x0)[:, None]
    ty = (vc - y0)[:, None]
    top = (1 - tx) * fmap[:, y0, x0].T + tx * fmap[:, y0, x1].T
    bot = (1 - tx) * fmap[:, y1, x0].T + tx * fmap[:, y1, x1].T
    feats = (1 - ty) * top + ty * bot
    feats[~ok] = 0.0
    return feats.astype(np.float64), ok


def level_mask(t: int, level_dims) -> np.ndarray:
    """Boolean channel mask for pruning step t (1-indexed).

    For t < L keeps the 1-indexed dims k > sum(level_dims[: L-t]); for
    t >= L keeps everything.
    """
    if t < 1:
        raise InvalidStep(f"pruning step {t} must be >= 1")
    level_dims = tuple(int(d) for d in level_dims)
    total = sum(level_dims)
    n_levels = len(level_dims)
    mask = np.zeros(total, dtype=bool)
    if t >= n_levels:
        mask[:] = True
    else:
        mask[sum(level_dims[: n_levels - t]):] = True
    return mask


def masked_similarity(fm: np.ndarray, fn: np.ndarray, mhat: np.ndarray) -> float:
    """Cosine similarity of the masked sub-vectors; 0 when a norm vanishes."""
    fm = np.asarray(fm, dtype=np.float64)[np.asarray(mhat, dtype=bool)]
    fn = np.asarray(fn, dtype=np.float64)[np.asarray(mhat, dtype=bool)]
    nm = np.linalg.norm(fm)
    nn = np.linalg.norm(fn)
    if nm < 1e-12 or nn < 1e-12:
        return 0.0
    return float(fm @ fn / (nm * nn))


def compute_prune_mask(
    field: GaussianField,
    views: list[CameraView],
    features: FeatureStack,
    t: int,
    tau_t: float,
    keep_diagnostics: bool = True,
) -> PruneDecision:
    """Evaluate the all-pairs similarity test for every Gaussian center."""
    if t < 1:
        raise InvalidStep(f"pruning step {t} must be >= 1")
    for view in views:
        if view.view_id not in features.maps:
            raise FeatureViewMismatch(f"no feature map for view {view.view_id}")
        fmap = features.maps[view.view_id]
        if fmap.shape[1:] != (view.height, view.width):
            raise FeatureViewMismatch(
                f"view {view.view_id}: features {fmap.shape[1:]} vs image {(view.height, view.width)}"
            )

    m = len(field)
    n = len(views)
    mhat = level_mask(t, features.level_dims)
    positions = field.positions.detach().numpy()

    feats = np.zeros((n, m, int(mhat.sum())))
    valid = np.zeros((n, m), dtype=bool)
    for i, view in enumerate(views):
        uv, _, in_front = project_points(positions, view)
        f, ok = _query_features_batch(features.maps[view.view_id], uv, in_front)
        feats[i] = f[:, mhat]
        valid[i] = ok

    norms = np.linalg.norm(feats, axis=2)
    pair_list = [(a, b) for a in range(n) for b in range(a + 1, n)]
    sims = np.full((m, len(pair_list)), np.nan)
    all_below = np.ones(m, dtype=bool)
    any_pair = np.zeros(m, dtype=bool)
    for p, (a, b) in enumerate(pair_list):
        both = valid[a] & valid[b]
        dot = (feats[a] * feats[b]).sum(axis=1)
        denom = norms[a] * norms[b]
        s = np.where((norms[a] >= 1e-12) & (norms[b] >= 1e-12), dot / np.maximum(denom, 1e-300), 0.0)
        sims[both, p] = s[both]
        any_pair |= both
        all_below &= ~both | (s < tau_t)

    mask = any_pair & all_below
    return PruneDecision(
        mask=mask,
        valid_view_count=valid.sum(axis=0).astype(int),
        pairwise_sims=sims if keep_diagnostics else None,
    )


def apply_prune(field: GaussianField, decision: PruneDecision) -> GaussianField:
    """Remove exactly the masked Gaussians, preserving survivor order."""
    if decision.mask.shape[0] != len(field):
        raise SizeMismatch(f"mask length {decision.mask.shape[0]} != field size {len(field)}")
    return field.masked(~decision.mask)


# ----------------------------------------------------------------------
# Feature-stack file: magic MCFS, u32 version, u32 n_views, u32 L,
# L*u32 level dims, then per view u32 view_id, u32 H, u32 W and
# K*H*W float32 channel-major, all little-endian.
# ----------------------------------------------------------------------

def save_feature_stack(path, stack: FeatureStack) -> None:
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", FEATURE_VERSION, len(stack.maps), len(stack.level_dims)))
        fh.write(struct.pack(f"<{len(stack.level_dims)}I", *stack.level_dims))
        for view_id in sorted(stack.maps):
            fmap = np.ascontiguousarray(stack.maps[view_id], dtype="<f4")
            _, h, w = fmap.shape
            fh.write(struct.pack("<III", view_id, h, w))
            fh.write(fmap.tobytes())


def load_feature_stack(path) -> FeatureStack:
    with open(path, "rb") as fh:
        if fh.read(4) != FEATURE_MAGIC:
            raise ValueError(f"{path}: bad feature-file magic")
        version, n_views, n_levels = struct.unpack("<III", fh.read(12))
        if version != FEATURE_VERSION:
            raise ValueError(f"{path}: unsupported feature-file version {version}")
        level_dims = struct.unpack(f"<{n_levels}I", fh.read(4 * n_levels))
        k = sum(level_dims)
        maps = {}
        for _ in range(n_views):
            view_id, h, w = struct.unpack("<III", fh.read(12))
            data = np.frombuffer(fh.read(4 * k * h * w), dtype="<f4")
            maps[view_id] = data.reshape(k, h, w).copy()
    return FeatureStack(level_dims=level_dims, maps=maps)
