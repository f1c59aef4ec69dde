"""Scene bundles: a frame sequence plus everything needed to train on it."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .body import BodyParams, Skeleton
from .gaussians import GaussianSet
from .geometry import CameraIntrinsics, CameraState, RigidTransform, as_tensor, so3_exp_t


@dataclass(frozen=True)
class SceneConfig:
    width: int = 64
    height: int = 64
    focal: float = 90.0
    frames: int = 20
    joints: int = 24  # 24 = humanoid, otherwise a straight chain
    human_count: int = 2000
    background_count: int = 3000
    motion_amplitude: float = 0.3  # radians
    nonrigid_amplitude: float = 0.0  # scene units
    color_flicker: float = 0.0  # linear rgb
    camera_distance: float = 3.0
    camera_arc: float = 0.5  # radians of azimuth covered by the orbit
    texture_period: float = 0.15  # scene units
    sh_degree: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.frames < 1:
            raise ValueError(f"need at least one frame, got {self.frames}")
        if self.width < 1 or self.height < 1 or not self.focal > 0:
            raise ValueError("image size and focal length must be positive")
        if self.joints < 1 or self.human_count < 1 or self.background_count < 1:
            raise ValueError("joint and Gaussian counts must be positive")
        if min(self.motion_amplitude, self.nonrigid_amplitude, self.color_flicker) < 0:
            raise ValueError("motion amplitudes must be >= 0")
        if not self.camera_distance > 0 or not self.texture_period > 0:
            raise ValueError("camera distance and texture period must be positive")


@dataclass(frozen=True)
class NonRigidMotion:
    """Ground-truth residual motion on top of skinning.

    A travelling ripple displaces each Gaussian along a fixed direction and a
    global tint oscillates over time.
    """

    amplitude: float = 0.0
    wavenumber: float = 6.0
    direction: tuple = (0.0, 0.0, 1.0)
    flicker: float = 0.0
    phases: tuple = (0.0, 2.1, 4.2)

    def offsets(self, mu_c: torch.Tensor, t: float) -> torch.Tensor:
        arg = 2.0 * np.pi * t + self.wavenumber * mu_c[:, 1]
        return self.amplitude * torch.sin(arg)[:, None] * as_tensor(self.direction)

    def rotations(self, mu_c: torch.Tensor, t: float) -> torch.Tensor:
        arg = 2.0 * np.pi * t + self.wavenumber * mu_c[:, 1]
        aa = (self.amplitude * torch.cos(arg))[:, None] * as_tensor((0.0, 1.0, 0.0))
        return so3_exp_t(aa)

    def color(self, n: int, t: float) -> torch.Tensor:
        tint = [self.flicker * np.sin(2.0 * np.pi * t + p) for p in self.phases]
        return as_tensor(tint).expand(n, 3)

    @property
    def active(self) -> bool:
        return self.amplitude > 0 or self.flicker > 0


def frame_time(frame: int, frames: int) -> float:
    """Frame index normalised to [0, 1]."""
    return frame / (frames - 1) if frames > 1 else 0.0


def split_frames(frames: int):
    """Interleaved 80/10/10 split: ``(train, val, test)`` index arrays.

    Sequences shorter than 10 frames may have empty val/test lists.
    """
    idx = np.arange(frames)
    test = idx[idx % 10 == 5]
    val = idx[idx % 10 == 8]
    train = idx[(idx % 10 != 5) & (idx % 10 != 8)]
    return train, val, test


@dataclass
class SceneBundle:
    config: SceneConfig
    skeleton: Skeleton
    intrinsics: CameraIntrinsics
    gt_cameras: list  # [T] RigidTransform, world -> camera
    init_cameras: list  # [T] RigidTransform, the coarse poses handed to training
    gt_body: BodyParams
    init_body: BodyParams
    gt_human: GaussianSet
    gt_background: GaussianSet
    init_human: GaussianSet
    init_background: GaussianSet
    motion: NonRigidMotion
    images: torch.Tensor  # [T, H, W, 3]
    masks: torch.Tensor  # [T, H, W], binary
    human_white: torch.Tensor  # [T, H, W, 3], GT human over white
    scene_radius: float
    seed: int
    extras: dict = field(default_factory=dict)

    @property
    def frames(self) -> int:
        return int(self.images.shape[0])

    def split(self):
        return split_frames(self.frames)

    def camera(self, frame: int, gt: bool = False) -> CameraState:
        base = (self.gt_cameras if gt else self.init_cameras)[frame]
        return CameraState(self.intrinsics, base)

    def with_init(self, cameras=None, body: BodyParams | None = None) -> SceneBundle:
        """Copy with replaced coarse cameras and/or body parameters."""
        out = SceneBundle(**{k: getattr(self, k) for k in self.__dataclass_fields__})
        if cameras is not None:
            if len(cameras) != self.frames:
                raise ValueError(f"{len(cameras)} cameras for {self.frames} frames")
            out.init_cameras = list(cameras)
        if body is not None:
            if body.frames != self.frames:
                raise ValueError(f"body params have {body.frames} frames, scene has {self.frames}")
            out.init_body = body
        out.extras = dict(self.extras)
        return out


def camera_error(est: RigidTransform, gt: RigidTransform):
    """``(rotation error in degrees, camera-centre distance)``."""
    rel = est.rotation * gt.rotation.inverse()
    return float(np.degrees(rel.angle())), float(np.linalg.norm(est.inverse().translation - gt.inverse().translation))


def effective_camera(base: RigidTransform, correction) -> RigidTransform:
    c = correction.detach().numpy() if isinstance(correction, torch.Tensor) else np.asarray(correction)
    return CameraState(CameraIntrinsics(1.0, 1.0, 0.0, 0.0, 1, 1), base, c).pose()

