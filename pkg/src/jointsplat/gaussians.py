"""Columnar storage for human and background Gaussians.

Attributes are stored unconstrained: log-scales, opacity logits, raw
quaternions and skinning-weight logits, so every setting of the raw
tensors is a valid Gaussian.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
import torch
from scipy.spatial import cKDTree

from .geometry import DTYPE, as_tensor, quat_to_matrix_t

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792, 0.5462742152960396)
SH_C3 = (
    -0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
    -0.4570457994644658, 1.445305721320277, -0.5900435899266435,
)

# softmax(-40) relative to a 0 logit is ~4e-18, below float64 resolution of 1.
LBS_LOGIT_FLOOR = -40.0
MIN_SCALE = 1e-7

HUMAN = "human"
BACKGROUND = "background"


def build_covariance(rot, scale):
    """``R S S^T R^T`` for batched ``rot [..., 3, 3]`` and ``scale [..., 3]``.

    ``rot`` need not be orthonormal (blended skinning rotations are not); the
    result is PSD either way because it is a Gram matrix.  Works on numpy
    arrays and torch tensors.
    """
    m = rot * scale[..., None, :]
    return m @ m.swapaxes(-1, -2)


def eval_sh(sh, dirs, degree: int):
    """Real spherical-harmonics colour, ``sh [..., (d+1)^2, 3]``, ``dirs [..., 3]``.

    Returns ``C0 * sh_0 + 0.5 + higher-order terms``; no clamping.
    """
    if not 0 <= degree <= 3:
        raise ValueError(f"SH degree must be in 0..3, got {degree}")
    if sh.shape[-2] < (degree + 1) ** 2:
        raise ValueError(f"need {(degree + 1) ** 2} SH coefficients for degree {degree}, got {sh.shape[-2]}")
    out = SH_C0 * sh[..., 0, :] + 0.5
    if degree == 0:
        return out
    x, y, z = dirs[..., 0:1], dirs[..., 1:2], dirs[..., 2:3]
    out = out - SH_C1 * y * sh[..., 1, :] + SH_C1 * z * sh[..., 2, :] - SH_C1 * x * sh[..., 3, :]
    if degree == 1:
        return out
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    out = (
        out
        + SH_C2[0] * xy * sh[..., 4, :]
        + SH_C2[1] * yz * sh[..., 5, :]
        + SH_C2[2] * (2.0 * zz - xx - yy) * sh[..., 6, :]
        + SH_C2[3] * xz * sh[..., 7, :]
        + SH_C2[4] * (xx - yy) * sh[..., 8, :]
    )
    if degree == 2:
        return out
    return (
        out
        + SH_C3[0] * y * (3.0 * xx - yy) * sh[..., 9, :]
        + SH_C3[1] * xy * z * sh[..., 10, :]
        + SH_C3[2] * y * (4.0 * zz - xx - yy) * sh[..., 11, :]
        + SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy) * sh[..., 12, :]
        + SH_C3[4] * x * (4.0 * zz - xx - yy) * sh[..., 13, :]
        + SH_C3[5] * z * (xx - yy) * sh[..., 14, :]
        + SH_C3[6] * x * (xx - 3.0 * yy) * sh[..., 15, :]
    )


def rgb_to_sh0(rgb):
    return (rgb - 0.5) / SH_C0


@dataclass
class GaussianSet:
    kind: str
    means: torch.Tensor  # [N, 3]; canonical for humans, world for background
    quats: torch.Tensor  # [N, 4] (w, x, y, z), normalised on use
    log_scales: torch.Tensor  # [N, 3]
    opacity_logits: torch.Tensor  # [N]
    sh: torch.Tensor  # [N, (d+1)^2, 3]
    lbs_logits: torch.Tensor | None = None  # [N, K], human only
    lbs_init: torch.Tensor | None = None  # [N, K], frozen

    def __post_init__(self):
        if self.kind not in (HUMAN, BACKGROUND):
            raise ValueError(f"unknown Gaussian set kind {self.kind!r}")
        n = self.means.shape[0]
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, torch.Tensor) and v.shape[0] != n:
                raise ValueError(f"column {f.name} has {v.shape[0]} rows, expected {n}")
        has_lbs = self.lbs_logits is not None
        if (self.kind == HUMAN) != has_lbs:
            raise ValueError("human sets carry skinning weights and background sets do not")
        if has_lbs and self.lbs_init is None:
            self.lbs_init = torch.softmax(self.lbs_logits.detach(), -1).clone()

    PARAMS = ("means", "quats", "log_scales", "opacity_logits", "sh", "lbs_logits")

    @property
    def count(self) -> int:
        return int(self.means.shape[0])

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(self.sh.shape[1]))) - 1

    def scales(self) -> torch.Tensor:
        return torch.exp(self.log_scales)

    def opacities(self) -> torch.Tensor:
        return torch.sigmoid(self.opacity_logits)

    def rotations(self) -> torch.Tensor:
        return quat_to_matrix_t(self.quats)

    def lbs_weights(self) -> torch.Tensor:
        if self.lbs_logits is None:
            raise ValueError("background Gaussians have no skinning weights")
        return torch.softmax(self.lbs_logits, -1)

    def covariances(self) -> torch.Tensor:
        return build_covariance(self.rotations(), self.scales())

    def params(self) -> dict[str, torch.Tensor]:
        return {k: getattr(self, k) for k in self.PARAMS if getattr(self, k) is not None}

    def clone(self) -> GaussianSet:
        kw = {
            f.name: (getattr(self, f.name).detach().clone() if isinstance(getattr(self, f.name), torch.Tensor)
                     else getattr(self, f.name))
            for f in fields(self)
        }
        return GaussianSet(**kw)

    def select(self, idx) -> GaussianSet:
        kw = {
            f.name: (getattr(self, f.name)[idx] if isinstance(getattr(self, f.name), torch.Tensor)
                     else getattr(self, f.name))
            for f in fields(self)
        }
        return GaussianSet(**kw)

    @staticmethod
    def concat(a: GaussianSet, b: GaussianSet) -> GaussianSet:
        if a.kind != b.kind:
            raise ValueError("cannot concatenate sets of different kinds")
        kw = {"kind": a.kind}
        for f in fields(a):
            if f.name == "kind":
                continue
            va, vb = getattr(a, f.name), getattr(b, f.name)
            kw[f.name] = None if va is None else torch.cat([va, vb])
        return GaussianSet(**kw)


def _nn_distances(points: np.ndarray, k: int) -> np.ndarray:
    """Mean distance to the ``k`` nearest other points."""
    tree = cKDTree(points)
    dist, _ = tree.query(points, k=k + 1)
    return dist[:, 1:].mean(axis=1)


def init_background_gaussians(points, rgb, sh_degree: int = 1, default_scale: float = 0.1) -> GaussianSet:
    """One isotropic Gaussian per point, sized by the local point density."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rgb = np.asarray(rgb, dtype=np.float64).reshape(-1, 3)
    n = points.shape[0]
    if n == 0:
        raise ValueError("background point cloud is empty")
    if rgb.shape[0] != n:
        raise ValueError(f"{n} points but {rgb.shape[0]} colours")
    if n == 1:
        scales = np.array([default_scale])
    else:
        scales = np.maximum(_nn_distances(points, min(3, n - 1)), MIN_SCALE)
    sh = np.zeros((n, (sh_degree + 1) ** 2, 3))
    sh[:, 0] = rgb_to_sh0(rgb)
    return GaussianSet(
        kind=BACKGROUND,
        means=as_tensor(points),
        quats=as_tensor(np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))),
        log_scales=as_tensor(np.log(np.repeat(scales[:, None], 3, axis=1))),
        opacity_logits=torch.zeros(n, dtype=DTYPE),
        sh=as_tensor(sh),
    )


def weights_to_logits(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return np.maximum(np.log(w), LBS_LOGIT_FLOOR)


def init_human_gaussians(skeleton, count: int, seed: int, sh_degree: int = 1,
                         default_scale: float = 0.05) -> GaussianSet:
    """Sample Gaussians uniformly on the canonical body surface.

    Skinning weights and base colour come from the nearest skeleton surface
    vertex; the initial scale is the nearest-neighbour spacing.
    """
    if count < 1:
        raise ValueError(f"need at least one human Gaussian, got {count}")
    rng = np.random.default_rng(seed)
    pts = skeleton.sample_surface(count, rng)
    _, nearest = cKDTree(skeleton.vertices).query(pts, k=1)
    weights = skeleton.vertex_weights[nearest]
    albedo = skeleton.vertex_colors[nearest]
    if count == 1:
        scales = np.array([default_scale])
    else:
        scales = np.maximum(_nn_distances(pts, 1), MIN_SCALE)
    sh = np.zeros((count, (sh_degree + 1) ** 2, 3))
    sh[:, 0] = rgb_to_sh0(albedo)
    return GaussianSet(
        kind=HUMAN,
        means=as_tensor(pts),
        quats=as_tensor(np.tile([1.0, 0.0, 0.0, 0.0], (count, 1))),
        log_scales=as_tensor(np.log(np.repeat(scales[:, None], 3, axis=1))),
        opacity_logits=torch.zeros(count, dtype=DTYPE),
        sh=as_tensor(sh),
        lbs_logits=as_tensor(weights_to_logits(weights)),
    )
