"""Capsule-skinned kinematic body, skinning deformation and depth alignment.

The body is a K-joint tree.  Each joint owns capsules running from it to
its children (or to a tip for leaf joints); the capsule surfaces supply the
canonical vertex set with skinning weights.  ``beta[k]`` scales the length
of the bone ending at joint ``k``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .gaussians import HUMAN, GaussianSet, build_covariance
from .geometry import DTYPE, as_tensor, so3_exp_t

# SMPL-like 24-joint topology, y-up, facing +z, mild A-pose (metres).
HUMANOID_PARENTS = [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21]
HUMANOID_OFFSETS = [
    (0.0, 0.92, 0.0),  # pelvis (absolute rest position)
    (0.09, -0.08, 0.0), (-0.09, -0.08, 0.0), (0.0, 0.11, 0.0),
    (0.01, -0.38, 0.0), (-0.01, -0.38, 0.0), (0.0, 0.13, 0.0),
    (0.0, -0.40, 0.0), (0.0, -0.40, 0.0), (0.0, 0.05, 0.0),
    (0.0, -0.05, 0.12), (0.0, -0.05, 0.12), (0.0, 0.21, 0.0),
    (0.07, 0.12, 0.0), (-0.07, 0.12, 0.0), (0.0, 0.09, 0.03),
    (0.11, 0.03, 0.0), (-0.11, 0.03, 0.0), (0.20, -0.14, 0.0),
    (-0.20, -0.14, 0.0), (0.20, -0.14, 0.0), (-0.20, -0.14, 0.0),
    (0.06, -0.04, 0.0), (-0.06, -0.04, 0.0),
]
HUMANOID_RADII = [
    0.10, 0.075, 0.075, 0.11, 0.055, 0.055, 0.12, 0.045, 0.045, 0.12, 0.04, 0.04,
    0.05, 0.05, 0.05, 0.10, 0.045, 0.045, 0.04, 0.04, 0.035, 0.035, 0.03, 0.03,
]
HUMANOID_TIPS = {10: (0.0, 0.0, 0.06), 11: (0.0, 0.0, 0.06), 15: (0.0, 0.12, 0.0),
                 22: (0.05, -0.03, 0.0), 23: (-0.05, -0.03, 0.0)}


@dataclass(frozen=True)
class Capsule:
    owner: int
    start: np.ndarray
    end: np.ndarray
    radius: float
    child: int = -1  # joint at the distal end, -1 for tips

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.end - self.start))

    @property
    def area(self) -> float:
        return 2.0 * np.pi * self.radius * self.length + 4.0 * np.pi * self.radius**2


def _perp_basis(axis: np.ndarray):
    a = axis / np.linalg.norm(axis)
    helper = np.array([1.0, 0.0, 0.0]) if abs(a[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(a, helper)
    u /= np.linalg.norm(u)
    return a, u, np.cross(a, u)


def _sample_capsule(cap: Capsule, n: int, rng: np.random.Generator):
    """Uniform surface samples and their axial fraction in [0, 1]."""
    axis = cap.end - cap.start
    length = cap.length
    a, u, v = _perp_basis(axis if length > 0 else np.array([0.0, 1.0, 0.0]))
    side = 2.0 * np.pi * cap.radius * length
    on_side = rng.random(n) < side / cap.area
    s = rng.random(n)
    phi = rng.random(n) * 2.0 * np.pi
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    ring = np.cos(phi)[:, None] * u + np.sin(phi)[:, None] * v
    side_pts = cap.start + s[:, None] * axis + cap.radius * ring
    cap_end = (d @ a) > 0
    cap_pts = np.where(cap_end[:, None], cap.end, cap.start) + cap.radius * d
    pts = np.where(on_side[:, None], side_pts, cap_pts)
    frac = np.where(on_side, s, cap_end.astype(np.float64))
    return pts, frac


@dataclass(frozen=True)
class Skeleton:
    parents: np.ndarray  # [K], parents[k] < k, root = -1
    offsets: np.ndarray  # [K, 3]; root row is its absolute rest position
    capsules: tuple
    vertices: np.ndarray  # [V, 3] canonical surface vertices
    vertex_weights: np.ndarray  # [V, K]
    vertex_colors: np.ndarray  # [V, 3] linear albedo

    @property
    def num_joints(self) -> int:
        return len(self.parents)

    @classmethod
    def build(cls, parents, offsets, radii, tips=None, blend: float = 0.25,
              vertices_per_area: float = 1500.0, seed: int = 0) -> Skeleton:
        parents = np.asarray(parents, dtype=np.int64)
        offsets = np.asarray(offsets, dtype=np.float64).reshape(-1, 3)
        k = len(parents)
        if offsets.shape[0] != k:
            raise ValueError(f"{k} parents but {offsets.shape[0]} offsets")
        if k == 0 or parents[0] != -1:
            raise ValueError("joint 0 must be the root with parent -1")
        for j in range(1, k):
            if not 0 <= parents[j] < j:
                raise ValueError(f"joint {j} has parent {parents[j]}; parents must precede children")
        tips = tips or {}
        rest = rest_joint_positions(parents, offsets)
        radii = np.broadcast_to(np.asarray(radii, dtype=np.float64), (k,))
        caps = []
        for j in range(k):
            children = np.flatnonzero(parents == j)
            for c in children:
                caps.append(Capsule(j, rest[j], rest[c], float(radii[j]), int(c)))
            if len(children) == 0:
                tip = np.asarray(tips.get(j, (0.0, 0.0, 0.0)), dtype=np.float64)
                caps.append(Capsule(j, rest[j], rest[j] + tip, float(radii[j])))
        rng = np.random.default_rng(seed)
        verts, weights = [], []
        for cap in caps:
            n = max(8, int(round(cap.area * vertices_per_area)))
            pts, frac = _sample_capsule(cap, n, rng)
            w = np.zeros((n, k))
            w[:, cap.owner] = 1.0
            if blend > 0:
                # soften towards the parent near the proximal joint and
                # towards the child near the distal joint
                p = parents[cap.owner]
                if p >= 0:
                    share = np.clip(0.5 * (1.0 - frac / blend), 0.0, 0.5)
                    w[:, p] += share
                    w[:, cap.owner] -= share
                if cap.child >= 0:
                    share = np.clip(0.5 * (1.0 - (1.0 - frac) / blend), 0.0, 0.5)
                    w[:, cap.child] += share
                    w[:, cap.owner] -= share
            verts.append(pts)
            weights.append(w)
        verts = np.concatenate(verts)
        return cls(parents, offsets, tuple(caps), verts, np.concatenate(weights),
                   np.full((len(verts), 3), 0.5))

    @classmethod
    def humanoid(cls, **kw) -> Skeleton:
        return cls.build(HUMANOID_PARENTS, HUMANOID_OFFSETS, HUMANOID_RADII, HUMANOID_TIPS, **kw)

    @classmethod
    def chain(cls, num_joints: int, bone_length: float = 0.5, radius: float = 0.05, **kw) -> Skeleton:
        """Straight chain along +y; ``num_joints=1`` gives a single capsule."""
        parents = [-1] + list(range(num_joints - 1))
        offsets = [(0.0, 0.0, 0.0)] + [(0.0, bone_length, 0.0)] * (num_joints - 1)
        return cls.build(parents, offsets, radius, {num_joints - 1: (0.0, bone_length, 0.0)}, **kw)

    def rest_joints(self) -> np.ndarray:
        return rest_joint_positions(self.parents, self.offsets)

    def with_colors(self, colors) -> Skeleton:
        colors = np.asarray(colors, dtype=np.float64).reshape(len(self.vertices), 3)
        return Skeleton(self.parents, self.offsets, self.capsules, self.vertices, self.vertex_weights, colors)

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        areas = np.array([c.area for c in self.capsules])
        which = rng.choice(len(self.capsules), size=n, p=areas / areas.sum())
        pts = np.empty((n, 3))
        for i, cap in enumerate(self.capsules):
            sel = np.flatnonzero(which == i)
            if len(sel):
                pts[sel] = _sample_capsule(cap, len(sel), rng)[0]
        return pts


def rest_joint_positions(parents, offsets) -> np.ndarray:
    pos = np.zeros_like(offsets)
    for j, p in enumerate(parents):
        pos[j] = offsets[j] if p < 0 else pos[p] + offsets[j]
    return pos


@dataclass
class BodyParams:
    theta: torch.Tensor  # [T, K, 3] local axis-angle per joint
    trans: torch.Tensor  # [T, 3] root translation
    beta: torch.Tensor  # [K] bone-length scales

    def __post_init__(self):
        if self.theta.ndim != 3 or self.theta.shape[-1] != 3:
            raise ValueError(f"theta must be [T, K, 3], got {tuple(self.theta.shape)}")
        if self.trans.shape != (self.theta.shape[0], 3):
            raise ValueError(f"trans must be [T, 3], got {tuple(self.trans.shape)}")
        if not bool(torch.all(torch.isfinite(self.theta))):
            raise ValueError("theta must be finite")
        if not bool(torch.all(self.beta > 0)):
            raise ValueError("beta must be positive")

    @classmethod
    def rest(cls, frames: int, num_joints: int) -> BodyParams:
        return cls(torch.zeros(frames, num_joints, 3, dtype=DTYPE), torch.zeros(frames, 3, dtype=DTYPE),
                   torch.ones(num_joints, dtype=DTYPE))

    @property
    def frames(self) -> int:
        return int(self.theta.shape[0])

    def clone(self) -> BodyParams:
        return BodyParams(self.theta.detach().clone(), self.trans.detach().clone(), self.beta.detach().clone())


@dataclass
class JointTransforms:
    """Rest-relative skinning transforms and posed joint positions."""

    rotations: torch.Tensor  # [K, 3, 3]
    translations: torch.Tensor  # [K, 3]
    joints: torch.Tensor  # [K, 3] posed joint positions


def forward_kinematics(skeleton: Skeleton, theta, trans, beta) -> JointTransforms:
    theta, trans, beta = as_tensor(theta), as_tensor(trans), as_tensor(beta)
    k = skeleton.num_joints
    if theta.shape != (k, 3):
        raise ValueError(f"theta must be [{k}, 3], got {tuple(theta.shape)}")
    if not (torch.all(torch.isfinite(theta)) and torch.all(torch.isfinite(trans)) and torch.all(torch.isfinite(beta))):
        raise ValueError("non-finite body parameters")
    local_r = so3_exp_t(theta)
    offsets = as_tensor(skeleton.offsets)
    g_r, g_t = [], []
    for j, p in enumerate(skeleton.parents):
        if p < 0:
            g_r.append(local_r[j])
            g_t.append(offsets[j] + trans)
        else:
            g_r.append(g_r[p] @ local_r[j])
            g_t.append(g_r[p] @ (beta[j] * offsets[j]) + g_t[p])
    rot = torch.stack(g_r)
    joints = torch.stack(g_t)
    rest = as_tensor(skeleton.rest_joints())
    return JointTransforms(rot, joints - (rot @ rest[..., None])[..., 0], joints)


def lbs_deform(gaussians: GaussianSet, transforms: JointTransforms, weights=None):
    """Posed means, blended rotations and covariances.

    ``mu_t = sum_k w_k T_k [mu_c; 1]`` and ``R_t = (sum_k w_k R_k) R_c``; the
    blended rotation is used as-is, without re-orthonormalisation.
    """
    if gaussians.kind != HUMAN:
        raise ValueError(f"skinning needs a human set, got {gaussians.kind!r}")
    w = gaussians.lbs_weights() if weights is None else as_tensor(weights)
    blend_r = torch.einsum("nk,kij->nij", w, transforms.rotations)
    mu = (blend_r @ gaussians.means[..., None])[..., 0] + w @ transforms.translations
    rot = blend_r @ gaussians.rotations()
    return mu, rot, build_covariance(rot, gaussians.scales())


def ransac_scale_shift(src, dst, iters: int = 256, inlier_tol: float | None = None, seed: int = 0):
    """Robust fit of ``dst ≈ s * src + b``.

    Two-point hypotheses are scored by inlier count; the winner is refit by
    least squares on its inliers.  Returns ``(s, b, inlier_mask)``.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1)
    n = len(src)
    if n < 2 or len(dst) != n:
        raise ValueError(f"need two equal-length arrays of at least 2 samples, got {n} and {len(dst)}")
    if inlier_tol is None:
        inlier_tol = 0.01 * float(np.ptp(dst))
    rng = np.random.default_rng(seed)
    best_count, best_mask = -1, None
    for _ in range(iters):
        i, j = rng.choice(n, size=2, replace=False)
        if src[i] == src[j]:
            continue
        s = (dst[i] - dst[j]) / (src[i] - src[j])
        b = dst[i] - s * src[i]
        mask = np.abs(s * src + b - dst) <= inlier_tol
        count = int(mask.sum())
        if count > best_count:
            best_count, best_mask = count, mask
    if best_mask is None:
        raise ValueError("all RANSAC hypotheses were degenerate (constant source values)")
    a = np.stack([src[best_mask], np.ones(best_count)], axis=1)
    (s, b), *_ = np.linalg.lstsq(a, dst[best_mask], rcond=None)
    mask = np.abs(s * src + b - dst) <= inlier_tol
    return float(s), float(b), mask
