"""The optimizable Gaussian primitive set.

Raw (unconstrained) parameters are stored; activations map them to the
quantities the renderer consumes:

  - scales   = exp(log_scales)
  - opacity  = sigmoid(opacity_logits)
  - rotation = quaternion / ||quaternion||   (w, x, y, z ordering)

Color is carried as real spherical-harmonic coefficients, (degree+1)^2
bands per channel, evaluated with the conventional 0.5 offset.
"""

from __future__ import annotations

import math

import numpy as np
import torch

from .errors import DegreeMismatch, ShapeMismatch, SingularCovariance, ZeroQuaternion
from .ply import read_ply, write_ply

# Real spherical-harmonic constants, bands 0..3.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


def rgb_to_sh_dc(rgb: np.ndarray) -> np.ndarray:
    """Invert the degree-0 color formula: dc such that dc*C0 + 0.5 = rgb."""
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


def quat_to_rotation(q: torch.Tensor) -> torch.Tensor:
    """Batch quaternion (M,4), raw, to rotation matrices (M,3,3).

    Normalization is part of the activation; raw storage is unconstrained.
    """
    norm = torch.linalg.norm(q, dim=-1, keepdim=True)
    q = q / norm
    w, x, y, z = q.unbind(-1)
    R = torch.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        dim=-1,
    )
    return R.reshape(-1, 3, 3)


def build_covariances(rotations: torch.Tensor, scales: torch.Tensor) -> torch.Tensor:
    """Batch Sigma = R S S^T R^T for raw quaternions and activated scales."""
    R = quat_to_rotation(rotations)
    L = R * scales.unsqueeze(-2)  # columns of R scaled: R @ diag(s)
    return L @ L.transpose(-1, -2)


def covariance_from(q, s) -> np.ndarray:
    """3x3 covariance from one quaternion and one positive scale triple."""
    q = np.asarray(q, dtype=np.float64).reshape(4)
    s = np.asarray(s, dtype=np.float64).reshape(3)
    if np.linalg.norm(q) < 1e-12:
        raise ZeroQuaternion("quaternion norm below 1e-12")
    if np.any(s <= 0):
        raise ValueError("scales must be positive")
    sigma = build_covariances(
        torch.from_numpy(q).reshape(1, 4), torch.from_numpy(s).reshape(1, 3)
    )
    return sigma[0].numpy()


def evaluate_gaussian(x, mu, sigma) -> float:
    """Unnormalized Gaussian density exp(-0.5 (x-mu)^T Sigma^-1 (x-mu))."""
    sigma = np.asarray(sigma, dtype=np.float64).reshape(3, 3)
    if np.linalg.cond(sigma) > 1e12:
        raise SingularCovariance("covariance condition number exceeds 1e12")
    d = np.asarray(x, dtype=np.float64).reshape(3) - np.asarray(mu, dtype=np.float64).reshape(3)
    return float(np.exp(-0.5 * d @ np.linalg.solve(sigma, d)))


def eval_sh(sh: torch.Tensor, dirs: torch.Tensor, degree: int) -> torch.Tensor:
    """Evaluate SH colors for a batch: sh (M,B,3), dirs (M,3) unit -> (M,3).

    Returns the raw value (including the 0.5 offset); the renderer clamps
    to [0,1].
    """
    result = SH_C0 * sh[:, 0]
    if degree >= 1:
        x, y, z = dirs[:, 0:1], dirs[:, 1:2], dirs[:, 2:3]
        result = result - SH_C1 * y * sh[:, 1] + SH_C1 * z * sh[:, 2] - SH_C1 * x * sh[:, 3]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        result = (
            result
            + SH_C2[0] * xy * sh[:, 4]
            + SH_C2[1] * yz * sh[:, 5]
            + SH_C2[2] * (2 * zz - xx - yy) * sh[:, 6]
            + SH_C2[3] * xz * sh[:, 7]
            + SH_C2[4] * (xx - yy) * sh[:, 8]
        )
    if degree >= 3:
        result = (
            result
            + SH_C3[0] * y * (3 * xx - yy) * sh[:, 9]
            + SH_C3[1] * xy * z * sh[:, 10]
            + SH_C3[2] * y * (4 * zz - xx - yy) * sh[:, 11]
            + SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy) * sh[:, 12]
            + SH_C3[4] * x * (4 * zz - xx - yy) * sh[:, 13]
            + SH_C3[5] * z * (xx - yy) * sh[:, 14]
            + SH_C3[6] * x * (xx - 3 * yy) * sh[:, 15]
        )
    return result + 0.5


def sh_to_color(sh, view_dir, degree: int) -> np.ndarray:
    """View-dependent color from one coefficient block (B,3). Raw, unclamped."""
    sh = np.asarray(sh, dtype=np.float64)
    if degree not in (0, 1, 2, 3):
        raise DegreeMismatch(f"degree {degree} outside 0..3")
    if sh.shape != ((degree + 1) ** 2, 3):
        raise DegreeMismatch(f"{sh.shape[0]} bands incompatible with degree {degree}")
    d = np.asarray(view_dir, dtype=np.float64).reshape(3)
    out = eval_sh(
        torch.from_numpy(sh).unsqueeze(0), torch.from_numpy(d).unsqueeze(0), degree
    )
    return out[0].numpy()


def inverse_sigmoid(x: float) -> float:
    return math.log(x / (1.0 - x))


class GaussianField:
    """Per-Gaussian parameter arrays plus densification statistics.

    Single writer (the trainer) during optimization; everything else
    treats instances as read-only snapshots.
    """

    def __init__(self, positions, rotations, log_scales, opacity_logits, sh_coeffs):
        self.positions = _as_tensor(positions, (-1, 3))
        m = self.positions.shape[0]
        self.rotations = _as_tensor(rotations, (m, 4))
        self.log_scales = _as_tensor(log_scales, (m, 3))
        self.opacity_logits = _as_tensor(opacity_logits, (m, 1))
        if m == 0:
            bands = np.asarray(sh_coeffs).shape[1] if np.asarray(sh_coeffs).ndim == 3 else 1
            self.sh_coeffs = torch.zeros(0, bands, 3, dtype=torch.float64)
        else:
            self.sh_coeffs = _as_tensor(sh_coeffs, (m, -1, 3))
        b = self.sh_coeffs.shape[1]
        if int(math.isqrt(b)) ** 2 != b:
            raise ShapeMismatch(f"{b} SH bands is not a square number")
        self.grad_accum = torch.zeros(m, 1, dtype=torch.float64)
        self.grad_count = torch.zeros(m, 1, dtype=torch.float64)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def sh_degree(self) -> int:
        return int(math.isqrt(self.sh_coeffs.shape[1])) - 1

    def scales(self) -> torch.Tensor:
        return torch.exp(self.log_scales)

    def opacities(self) -> torch.Tensor:
        return torch.sigmoid(self.opacity_logits)

    def unit_rotations(self) -> torch.Tensor:
        return self.rotations / torch.linalg.norm(self.rotations, dim=-1, keepdim=True)

    def raw_parameters(self) -> dict[str, torch.Tensor]:
        """Named raw parameter tensors, in optimizer group order."""
        return {
            "positions": self.positions,
            "rotations": self.rotations,
            "log_scales": self.log_scales,
            "opacity_logits": self.opacity_logits,
            "sh_coeffs": self.sh_coeffs,
        }

    def masked(self, keep: np.ndarray) -> "GaussianField":
        """New field containing only rows where keep is True, order preserved."""
        keep = torch.from_numpy(np.asarray(keep, dtype=bool))
        if keep.shape[0] != len(self):
            raise ShapeMismatch(f"mask length {keep.shape[0]} != field size {len(self)}")
        out = GaussianField(
            self.positions[keep].detach().clone(),
            self.rotations[keep].detach().clone(),
            self.log_scales[keep].detach().clone(),
            self.opacity_logits[keep].detach().clone(),
            self.sh_coeffs[keep].detach().clone(),
        )
        out.grad_accum = self.grad_accum[keep].clone()
        out.grad_count = self.grad_count[keep].clone()
        return out

    def clone(self) -> "GaussianField":
        return self.masked(np.ones(len(self), dtype=bool))

    # ------------------------------------------------------------------
    # PLY interop (base-3DGS vertex naming: x,y,z, f_dc_*, f_rest_*,
    # opacity, scale_*, rot_*; f_rest flattened channel-major).
    # ------------------------------------------------------------------
    def save_ply(self, path) -> None:
        m = len(self)
        b = self.sh_coeffs.shape[1]
        names = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"]
        names += [f"f_rest_{i}" for i in range(3 * (b - 1))]
        names += ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
        dtype = np.dtype([(n, "<f4") for n in names])
        rows = np.empty(m, dtype=dtype)
        pos = self.positions.detach().numpy()
        sh = self.sh_coeffs.detach().numpy()
        for i, n in enumerate(("x", "y", "z")):
            rows[n] = pos[:, i].astype(np.float32)
        for c in range(3):
            rows[f"f_dc_{c}"] = sh[:, 0, c].astype(np.float32)
        for c in range(3):
            for band in range(b - 1):
                rows[f"f_rest_{c * (b - 1) + band}"] = sh[:, band + 1, c].astype(np.float32)
        rows["opacity"] = self.opacity_logits.detach().numpy()[:, 0].astype(np.float32)
        ls = self.log_scales.detach().numpy()
        rot = self.rotations.detach().numpy()
        for i in range(3):
            rows[f"scale_{i}"] = ls[:, i].astype(np.float32)
        for i in range(4):
            rows[f"rot_{i}"] = rot[:, i].astype(np.float32)
        write_ply(path, rows)

    @classmethod
    def load_ply(cls, path) -> "GaussianField":
        rows = read_ply(path)
        names = rows.dtype.names
        m = len(rows)
        n_rest = sum(1 for n in names if n.startswith("f_rest_"))
        b = n_rest // 3 + 1
        positions = np.stack([rows["x"], rows["y"], rows["z"]], axis=1).astype(np.float64)
        sh = np.zeros((m, b, 3))
        for c in range(3):
            sh[:, 0, c] = rows[f"f_dc_{c}"]
        for c in range(3):
            for band in range(b - 1):
                sh[:, band + 1, c] = rows[f"f_rest_{c * (b - 1) + band}"]
        log_scales = np.stack([rows[f"scale_{i}"] for i in range(3)], axis=1).astype(np.float64)
        rotations = np.stack([rows[f"rot_{i}"] for i in range(4)], axis=1).astype(np.float64)
        opacity = rows["opacity"].astype(np.float64).reshape(m, 1)
        return cls(positions, rotations, log_scales, opacity, sh)


def _as_tensor(value, shape) -> torch.Tensor:
    # Always copy: field parameters are mutated in place by the optimizer
    # and must never alias caller-owned storage.
    if isinstance(value, torch.Tensor):
        t = value.detach().to(torch.float64).clone()
    else:
        t = torch.from_numpy(np.array(value, dtype=np.float64))
    try:
        return t.reshape(shape)
    except RuntimeError as exc:
        raise ShapeMismatch(str(exc)) from exc
