"""Rotations, rigid transforms and the pinhole camera.

Value types (``Rotation``, ``RigidTransform``, ``CameraIntrinsics``,
``CameraState``) are immutable numpy-backed records.  The batched
``*_t`` helpers at the bottom are their float64 torch counterparts used on
the differentiable paths.

Conventions: quaternions are (w, x, y, z); transforms map world -> camera
with ``p_cam = R @ p + t``; the camera looks down +z with y pointing down;
pixel (u, v) has its centre at integer coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

NEAR_PLANE = 1e-4
SMALL_ANGLE = 1e-6


class BehindCamera(ValueError):
    """Raised when a point lies on or behind the near plane."""


def _vec3(v, name: str) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64).reshape(-1)
    if a.shape != (3,):
        raise ValueError(f"{name} must have 3 components, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} must be finite, got {a}")
    return a


def hat(v) -> np.ndarray:
    x, y, z = np.asarray(v, dtype=np.float64)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


@dataclass(frozen=True)
class Rotation:
    """Unit quaternion (w, x, y, z)."""

    q: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0.0:
            raise ValueError(f"invalid quaternion {q}")
        q = q / n
        q.setflags(write=False)
        object.__setattr__(self, "q", q)

    @classmethod
    def from_unit(cls, q) -> Rotation:
        """Wrap an already normalised quaternion without touching its bits."""
        out = object.__new__(cls)
        q = np.array(q, dtype=np.float64).reshape(4)
        q.setflags(write=False)
        object.__setattr__(out, "q", q)
        return out

    @classmethod
    def identity(cls) -> Rotation:
        return cls(np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_matrix(cls, m) -> Rotation:
        m = np.asarray(m, dtype=np.float64)
        tr = np.trace(m)
        # Shepperd's method: pick the largest diagonal term for stability.
        if tr > 0:
            s = 2.0 * np.sqrt(tr + 1.0)
            q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
            q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif m[1, 1] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
            q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
            q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        return cls(np.array(q))

    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def inverse(self) -> Rotation:
        w, x, y, z = self.q
        return Rotation(np.array([w, -x, -y, -z]))

    def __mul__(self, other: Rotation) -> Rotation:
        return Rotation(quat_multiply(self.q, other.q))

    def apply(self, v) -> np.ndarray:
        return self.matrix() @ np.asarray(v, dtype=np.float64)

    def log(self) -> np.ndarray:
        """Axis-angle vector of this rotation (angle in [0, pi])."""
        w, *xyz = self.q
        xyz = np.array(xyz)
        if w < 0:
            w, xyz = -w, -xyz
        s = np.linalg.norm(xyz)
        if s < SMALL_ANGLE:
            return 2.0 * xyz / w
        return 2.0 * np.arctan2(s, w) * xyz / s

    def angle(self) -> float:
        return float(np.linalg.norm(self.log()))


def quat_multiply(a, b) -> np.ndarray:
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def so3_exp(axis_angle) -> Rotation:
    """Rotation by ``|v|`` radians about ``v / |v|``."""
    v = _vec3(axis_angle, "axis_angle")
    theta2 = float(v @ v)
    if theta2 < SMALL_ANGLE**2:
        # Taylor branch of cos(t/2) and sin(t/2)/t.
        w = 1.0 - theta2 / 8.0 + theta2 * theta2 / 384.0
        k = 0.5 - theta2 / 48.0 + theta2 * theta2 / 3840.0
    else:
        theta = np.sqrt(theta2)
        w = np.cos(0.5 * theta)
        k = np.sin(0.5 * theta) / theta
    return Rotation(np.array([w, k * v[0], k * v[1], k * v[2]]))


@dataclass(frozen=True)
class RigidTransform:
    rotation: Rotation = field(default_factory=Rotation.identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        t = _vec3(self.translation, "translation")
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls()

    @classmethod
    def from_matrix(cls, m) -> RigidTransform:
        m = np.asarray(m, dtype=np.float64)
        return cls(Rotation.from_matrix(m[:3, :3]), m[:3, 3])

    @classmethod
    def from_tangent(cls, xi) -> RigidTransform:
        """Axis-angle (first 3) + translation (last 3), the correction chart."""
        xi = np.asarray(xi, dtype=np.float64).reshape(6)
        return cls(so3_exp(xi[:3]), xi[3:])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation.matrix()
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> RigidTransform:
        r_inv = self.rotation.inverse()
        return RigidTransform(r_inv, -r_inv.apply(self.translation))

    def apply(self, p) -> np.ndarray:
        return self.rotation.apply(p) + self.translation

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        return se3_compose(self, other)


def se3_compose(delta: RigidTransform, base: RigidTransform) -> RigidTransform:
    """``delta ∘ base``: apply ``base`` first, then ``delta``."""
    return RigidTransform(
        delta.rotation * base.rotation,
        delta.rotation.apply(base.translation) + delta.translation,
    )


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image size must be >= 1, got {self.width}x{self.height}")

    @classmethod
    def centered(cls, width: int, height: int, focal: float) -> CameraIntrinsics:
        return cls(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0, width, height)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class CameraState:
    """Intrinsics, the coarse world->camera pose and its learnable correction.

    ``correction`` is a 6-vector: axis-angle (radians) then translation.
    """

    intrinsics: CameraIntrinsics
    base: RigidTransform = field(default_factory=RigidTransform.identity)
    correction: np.ndarray = field(default_factory=lambda: np.zeros(6))

    def __post_init__(self):
        c = np.asarray(self.correction, dtype=np.float64).reshape(6).copy()
        if not np.all(np.isfinite(c)):
            raise ValueError("camera correction must be finite")
        c.setflags(write=False)
        object.__setattr__(self, "correction", c)

    def pose(self) -> RigidTransform:
        return se3_compose(RigidTransform.from_tangent(self.correction), self.base)

    def with_correction(self, correction) -> CameraState:
        return CameraState(self.intrinsics, self.base, correction)

    def center(self) -> np.ndarray:
        return self.pose().inverse().translation


def project_point(camera: CameraState, p_world, near: float = NEAR_PLANE):
    """Pixel coordinates and depth of a world point."""
    x, y, z = camera.pose().apply(_vec3(p_world, "p_world"))
    if z <= near:
        raise BehindCamera(f"point at depth {z} is behind the near plane {near}")
    k = camera.intrinsics
    return np.array([k.fx * x / z + k.cx, k.fy * y / z + k.cy]), float(z)


def projection_jacobian(camera: CameraState, p_cam, near: float = NEAR_PLANE) -> np.ndarray:
    """d(pixel)/d(p_cam) for a camera-frame point."""
    x, y, z = _vec3(p_cam, "p_cam")
    if z <= near:
        raise BehindCamera(f"point at depth {z} is behind the near plane {near}")
    k = camera.intrinsics
    return np.array([
        [k.fx / z, 0.0, -k.fx * x / (z * z)],
        [0.0, k.fy / z, -k.fy * y / (z * z)],
    ])


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> RigidTransform:
    """World->camera transform for a camera at ``eye`` looking at ``target``.

    ``up`` is the world direction shown towards the top of the image.
    """
    eye = _vec3(eye, "eye")
    fwd = _vec3(target, "target") - eye
    fwd /= np.linalg.norm(fwd)
    down = -_vec3(up, "up")
    right = np.cross(down, fwd)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    return RigidTransform(Rotation.from_matrix(rot), -rot @ eye)


# ---------------------------------------------------------------------------
# torch (float64, batched) counterparts

DTYPE = torch.float64


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.tensor(np.array(x, dtype=np.float64), dtype=DTYPE)


def hat_t(v: torch.Tensor) -> torch.Tensor:
    zero = torch.zeros_like(v[..., 0])
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    return torch.stack([
        torch.stack([zero, -z, y], -1),
        torch.stack([z, zero, -x], -1),
        torch.stack([-y, x, zero], -1),
    ], -2)


def so3_exp_t(v: torch.Tensor) -> torch.Tensor:
    """Rodrigues' formula, ``[..., 3] -> [..., 3, 3]``, differentiable at 0."""
    theta2 = (v * v).sum(-1)
    small = theta2 < SMALL_ANGLE**2
    safe2 = torch.where(small, torch.ones_like(theta2), theta2)
    theta = torch.sqrt(safe2)
    a = torch.where(small, 1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0, (1.0 - torch.cos(theta)) / safe2)
    k = hat_t(v)
    eye = torch.eye(3, dtype=v.dtype).expand(k.shape)
    return eye + a[..., None, None] * k + b[..., None, None] * (k @ k)


def quat_to_matrix_t(q: torch.Tensor) -> torch.Tensor:
    q = q / q.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    return torch.stack([
        torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def camera_pose_t(camera: CameraState, correction: torch.Tensor | None = None):
    """Effective (R, t) of ``correction ∘ base`` as tensors.

    ``correction`` overrides ``camera.correction`` so the optimiser can own it.
    """
    if correction is None:
        correction = as_tensor(camera.correction)
    r_base = as_tensor(camera.base.rotation.matrix())
    t_base = as_tensor(camera.base.translation)
    dr = so3_exp_t(correction[:3])
    return dr @ r_base, dr @ t_base + correction[3:]
