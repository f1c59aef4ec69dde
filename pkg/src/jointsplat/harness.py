"""Synthetic benchmark: scene generation, init corruption, metrics, sweeps.

Scenes are rendered with the project's own rasterizer, so ground-truth
parameters reproduce the stored frames exactly.
"""

from __future__ import annotations

import io
import math
import time
from dataclasses import dataclass, replace

import numpy as np
import torch

from .body import BodyParams, Skeleton, forward_kinematics
from .gaussians import GaussianSet, init_background_gaussians, init_human_gaussians
from .geometry import DTYPE, CameraIntrinsics, CameraState, RigidTransform, as_tensor, look_at, se3_compose
from .losses import background_loss, human_loss, ssim
from .optim import DEFAULT_LR, adam_update
from .render import FramePose, ImageBuffer, pose_human, render_composite
from .scene import NonRigidMotion, SceneBundle, SceneConfig, camera_error, effective_camera, frame_time
from .train import ModelState, TrainConfig, train

SWEEP_SIGMAS = (0.0, 0.005, 0.01, 0.015, 0.02)
SWEEP_MODES = ("joint", "frozen")
SWEEP_HEADER = "sigma\tmode\tseed\tpsnr\tssim"

# small scene and short schedule used by the experiment suite; camera and
# pose rates are raised because each frame sees only a few dozen updates
BENCH_SCENE = dict(width=48, height=48, focal=67.0, frames=10, human_count=600, background_count=800)
BENCH_SCHEDULE = dict(warmup=100, independent=150, joint=150)
BENCH_LR = {**DEFAULT_LR, "camera": 0.01, "theta": 0.003}

TARGET = (0.0, 0.9, 0.0)
GT_OPACITY_LOGIT = 3.0

# (joint, axis, relative amplitude, phase) of the humanoid's periodic motion
HUMANOID_MOTION = (
    (1, 0, 1.0, 0.0), (2, 0, 1.0, math.pi), (4, 0, -0.8, 0.5), (5, 0, -0.8, 0.5 + math.pi),
    (3, 1, 0.3, 0.3), (16, 2, 0.8, 0.0), (17, 2, -0.8, 0.0), (18, 1, 1.0, 1.0), (19, 1, -1.0, 1.0),
    (12, 0, 0.3, 2.0),
)


def procedural_texture(points, period: float, seed: int, contrast: float = 0.35) -> np.ndarray:
    """Three sinusoidal stripe fields (one per channel) in [0.05, 0.95]."""
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(3, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    phase = rng.uniform(0, 2 * np.pi, 3)
    arg = 2 * np.pi * (np.asarray(points) @ dirs.T) / period + phase
    return np.clip(0.5 + contrast * np.sin(arg), 0.05, 0.95)


def _background_points(n: int, rng: np.random.Generator) -> np.ndarray:
    n_wall, n_floor = int(0.55 * n), int(0.3 * n)
    n_box = n - n_wall - n_floor
    wall = np.c_[rng.uniform(-3.0, 3.0, n_wall), rng.uniform(0.0, 3.0, n_wall), np.full(n_wall, -2.0)]
    floor = np.c_[rng.uniform(-3.0, 3.0, n_floor), np.zeros(n_floor), rng.uniform(-2.0, 1.5, n_floor)]
    # two boxes at mid depth, sampled on their faces
    centres = np.array([[-1.1, 0.35, -0.8], [1.2, 0.5, -1.2]])
    half = np.array([[0.3, 0.35, 0.3], [0.3, 0.5, 0.3]])
    which = rng.integers(0, 2, n_box)
    u = rng.uniform(-1.0, 1.0, (n_box, 3))
    axis = rng.integers(0, 3, n_box)
    u[np.arange(n_box), axis] = np.sign(rng.uniform(-1, 1, n_box))
    boxes = centres[which] + u * half[which]
    return np.concatenate([wall, floor, boxes])


def body_motion(skeleton: Skeleton, frames: int, amplitude: float) -> BodyParams:
    k = skeleton.num_joints
    theta = np.zeros((frames, k, 3))
    trans = np.zeros((frames, 3))
    for f in range(frames):
        t = frame_time(f, frames)
        if k == 24:
            for j, ax, rel, ph in HUMANOID_MOTION:
                theta[f, j, ax] = amplitude * rel * math.sin(2 * math.pi * t + ph)
            trans[f, 0] = 0.1 * amplitude * math.sin(2 * math.pi * t)
        else:
            for j in range(k):
                theta[f, j, 2] = amplitude * math.sin(2 * math.pi * t + 0.7 * j)
    return BodyParams(as_tensor(theta), as_tensor(trans), torch.ones(k, dtype=DTYPE))


def orbit_cameras(frames: int, distance: float, arc: float) -> list:
    cams = []
    target = np.array(TARGET)
    for f in range(frames):
        a = -arc / 2 + arc * frame_time(f, frames)
        eye = target + distance * np.array([math.sin(a), 0.05, math.cos(a)])
        cams.append(look_at(eye, target))
    return cams


def render_gt_frame(scene: SceneBundle, frame: int, mode: str = "full") -> ImageBuffer:
    """Re-render a frame from the bundle's ground-truth parameters."""
    t = frame_time(frame, scene.frames)
    m = scene.motion
    pose = FramePose.of(scene.gt_body, frame)
    residuals = None
    if m.active:
        mu = scene.gt_human.means
        residuals = (m.offsets(mu, t), m.rotations(mu, t), m.color(scene.gt_human.count, t))
    with torch.no_grad():
        posed = pose_human(scene.gt_human, scene.skeleton, pose, dynamics=m.active, residuals=residuals)
        img, _ = render_composite(scene.gt_human, scene.gt_background, scene.skeleton, pose, None,
                                  scene.camera(frame, gt=True), t, mode, posed=posed)
    return img


def generate_scene(config: SceneConfig | None = None) -> SceneBundle:
    config = config or SceneConfig()
    seed = config.seed
    rng = np.random.default_rng([seed, 1])
    if config.joints == 24:
        skeleton = Skeleton.humanoid(seed=seed)
    else:
        skeleton = Skeleton.chain(config.joints, seed=seed)
    skeleton = skeleton.with_colors(procedural_texture(skeleton.vertices, config.texture_period, seed + 101))

    gt_human = init_human_gaussians(skeleton, config.human_count, seed=seed * 7 + 1, sh_degree=config.sh_degree)
    gt_human.opacity_logits = torch.full_like(gt_human.opacity_logits, GT_OPACITY_LOGIT)
    init_human = init_human_gaussians(skeleton, config.human_count, seed=seed * 7 + 2, sh_degree=config.sh_degree)

    pts = _background_points(config.background_count, rng)
    rgb = procedural_texture(pts, 2.0 * config.texture_period, seed + 202)
    gt_bg = init_background_gaussians(pts, rgb, sh_degree=config.sh_degree)
    gt_bg.opacity_logits = torch.full_like(gt_bg.opacity_logits, GT_OPACITY_LOGIT)
    init_bg = init_background_gaussians(pts + rng.normal(scale=0.005, size=pts.shape),
                                        np.clip(rgb + rng.normal(scale=0.03, size=rgb.shape), 0, 1),
                                        sh_degree=config.sh_degree)

    intr = CameraIntrinsics(config.focal, config.focal, (config.width - 1) / 2, (config.height - 1) / 2,
                            config.width, config.height)
    cams = orbit_cameras(config.frames, config.camera_distance, config.camera_arc)
    body = body_motion(skeleton, config.frames, config.motion_amplitude)
    motion = NonRigidMotion(amplitude=config.nonrigid_amplitude, flicker=config.color_flicker)
    t, h, w = config.frames, config.height, config.width
    scene = SceneBundle(
        config=config, skeleton=skeleton, intrinsics=intr, gt_cameras=cams, init_cameras=list(cams),
        gt_body=body, init_body=body.clone(), gt_human=gt_human, gt_background=gt_bg,
        init_human=init_human, init_background=init_bg, motion=motion,
        images=torch.zeros(t, h, w, 3, dtype=DTYPE), masks=torch.zeros(t, h, w, dtype=DTYPE),
        human_white=torch.zeros(t, h, w, 3, dtype=DTYPE), scene_radius=float(config.camera_distance), seed=seed,
    )
    for f in range(t):
        scene.images[f] = render_gt_frame(scene, f, "full").rgb
        scene.masks[f] = (render_gt_frame(scene, f, "human").alpha >= 0.5).to(DTYPE)
        scene.human_white[f] = render_gt_frame(scene, f, "human_only_white").rgb
    return scene


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float = 0.0
    rotation_scale: float = 1.0  # radians per unit sigma
    translation_scale: float | None = None  # scene units per unit sigma; None = scene radius
    perturb_beta: bool = False

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ValueError(f"noise sigma must be >= 0, got {self.sigma}")


def camera_noise(sigma: float, radius: float, rng: np.random.Generator, rotation_scale: float = 1.0):
    return np.r_[sigma * rotation_scale * rng.normal(size=3), sigma * radius * rng.normal(size=3)]


def perturb_init(scene: SceneBundle, noise: NoiseSpec, seed: int):
    """Noisy coarse cameras and body parameters ``(cameras, body)``.

    Cameras get ``Exp(delta) ∘ T_gt``; joint rotations get additive noise.
    """
    if noise.sigma == 0:
        return list(scene.gt_cameras), scene.gt_body.clone()
    rng = np.random.default_rng([seed, 2])
    radius = scene.scene_radius if noise.translation_scale is None else noise.translation_scale
    cams = [se3_compose(RigidTransform.from_tangent(camera_noise(noise.sigma, radius, rng, noise.rotation_scale)), c)
            for c in scene.gt_cameras]
    gt = scene.gt_body
    theta = gt.theta + noise.sigma * as_tensor(rng.normal(size=tuple(gt.theta.shape)))
    beta = gt.beta.clone()
    if noise.perturb_beta:
        beta = (beta + noise.sigma * as_tensor(rng.normal(size=tuple(beta.shape)))).clamp_min(1e-3)
    return cams, BodyParams(theta, gt.trans.clone(), beta)


def _rgb(x) -> torch.Tensor:
    return x.rgb if isinstance(x, ImageBuffer) else as_tensor(x)


def psnr(a, b) -> float:
    """``10 log10(1 / MSE)`` over RGB; ``inf`` for identical images."""
    a, b = _rgb(a), _rgb(b)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = float(((a - b) ** 2).mean())
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


def ssim_metric(a, b) -> float:
    a, b = _rgb(a), _rgb(b)
    with torch.no_grad():
        return float(ssim(a, b))


def render_eval(scene: SceneBundle, state: ModelState, frame: int, dynamics: bool = True) -> ImageBuffer:
    """Human over white at the GT camera and GT joint angles (learned shape)."""
    gt = scene.gt_body
    pose = FramePose(gt.theta[frame], gt.trans[frame], state.body.beta.detach())
    t = frame_time(frame, scene.frames)
    with torch.no_grad():
        img, _ = render_composite(state.human, None, scene.skeleton, pose, state.net, scene.camera(frame, gt=True),
                                  t, "human_only_white", dynamics=dynamics)
    return img


def evaluate(scene: SceneBundle, state: ModelState, frames, dynamics: bool = True) -> dict:
    frames = [int(f) for f in frames]
    if not frames:
        raise ValueError("no frames to evaluate")
    ps, ss = [], []
    for f in frames:
        img = render_eval(scene, state, f, dynamics)
        ps.append(psnr(img, scene.human_white[f]))
        ss.append(ssim_metric(img, scene.human_white[f]))
    return {"psnr": float(np.mean(ps)), "ssim": float(np.mean(ss)), "frames": frames, "per_frame": ps}


def test_frames(scene: SceneBundle):
    train_f, val, test = scene.split()
    return test if len(test) else train_f


def mean_joint_error(skeleton: Skeleton, body: BodyParams, ref: BodyParams, frames=None) -> float:
    frames = range(body.frames) if frames is None else frames
    errs = []
    with torch.no_grad():
        for f in frames:
            a = forward_kinematics(skeleton, body.theta[f], body.trans[f], body.beta).joints
            b = forward_kinematics(skeleton, ref.theta[f], ref.trans[f], ref.beta).joints
            errs.append(float((a - b).norm(dim=-1).mean()))
    return float(np.mean(errs))


# ---------------------------------------------------------------------------
# single-factor recovery experiments

def recover_camera(scene: SceneBundle, frame: int, base: RigidTransform, iters: int = 2000, lr: float = 1e-3,
                   patience: int = 100, rel_tol: float = 1e-4):
    """Optimise a camera correction alone through the background loss.

    Gaussians stay at ground truth.  Stops early once the best loss has not
    improved by ``rel_tol`` (relative) for ``patience`` iterations.  Returns
    ``(effective pose, iterations used)``.
    """
    corr = torch.zeros(6, dtype=DTYPE, requires_grad=True)
    m, v = torch.zeros(6, dtype=DTYPE), torch.zeros(6, dtype=DTYPE)
    cam = CameraState(scene.intrinsics, base)
    image, mask = scene.images[frame], scene.masks[frame]
    pose = FramePose.of(scene.gt_body, frame)
    best, since = math.inf, 0
    it = 0
    for it in range(1, iters + 1):
        img, _ = render_composite(scene.gt_human, scene.gt_background, scene.skeleton, pose, None, cam, 0.0,
                                  "background_only", correction=corr)
        loss = background_loss(image, img.rgb, mask)
        (g,) = torch.autograd.grad(loss, corr)
        with torch.no_grad():
            new, m, v = adam_update(corr, g, m, v, it, lr)
            corr.copy_(new)
        val = float(loss.detach())
        if val < best * (1 - rel_tol):
            best, since = val, 0
        else:
            since += 1
            if since >= patience:
                break
    return effective_camera(base, corr), it


def recover_pose(scene: SceneBundle, frame: int, theta0, iters: int = 300, lr: float = 3e-4,
                 final_ratio: float = 0.01, soft_mask: bool = False):
    """Optimise one frame's joint angles alone through the human loss.

    The rate follows a cosine from ``lr`` down to ``final_ratio * lr``.
    ``soft_mask`` uses the ground-truth human alpha instead of the
    thresholded mask.
    """
    theta = as_tensor(theta0).clone().requires_grad_(True)
    m, v = torch.zeros_like(theta), torch.zeros_like(theta)
    gt = scene.gt_body
    cam = scene.camera(frame, gt=True)
    image, mask = scene.images[frame], scene.masks[frame]
    if soft_mask:
        mask = render_gt_frame(scene, frame, "human").alpha
    for it in range(1, iters + 1):
        pose = FramePose(theta, gt.trans[frame], gt.beta)
        img, _ = render_composite(scene.gt_human, None, scene.skeleton, pose, None, cam, 0.0, "human")
        loss = human_loss(image, img.rgb, mask, img.alpha)
        (g,) = torch.autograd.grad(loss, theta)
        rate = lr * (final_ratio + (1 - final_ratio) * (1 + math.cos(math.pi * (it - 1) / iters)) / 2)
        with torch.no_grad():
            new, m, v = adam_update(theta, g, m, v, it, rate)
            theta.copy_(new)
    return theta.detach()


# ---------------------------------------------------------------------------
# sweeps and ablations

def run_cell(scene: SceneBundle, sigma: float, mode: str, seed: int, config: TrainConfig,
             disable_dynamics: bool = False) -> dict:
    """Train one (sigma, mode) cell and evaluate it on the test frames."""
    if mode not in SWEEP_MODES:
        raise ValueError(f"unknown sweep mode {mode!r}")
    cams, body = perturb_init(scene, NoiseSpec(sigma), seed)
    noisy = scene.with_init(cams, body)
    cfg = replace(config, seed=seed, disable_synergistic=(mode == "frozen"), disable_dynamics=disable_dynamics)
    result = train(noisy, cfg)
    metrics = evaluate(noisy, result.state, test_frames(noisy), dynamics=not disable_dynamics)
    return {"sigma": float(sigma), "mode": mode, "seed": int(seed), "psnr": metrics["psnr"],
            "ssim": metrics["ssim"], "state": result.state, "log": result.log}


def robustness_sweep(scene_config: SceneConfig, train_config: TrainConfig, sigmas=SWEEP_SIGMAS,
                     modes=SWEEP_MODES, seeds=(0,), progress=None) -> list:
    """Rows of ``{sigma, mode, seed, psnr, ssim}`` sorted by (sigma, mode, seed)."""
    rows = []
    for seed in seeds:
        scene = generate_scene(replace(scene_config, seed=seed))
        for sigma in sigmas:
            for mode in modes:
                t0 = time.perf_counter()
                row = run_cell(scene, sigma, mode, seed, train_config)
                row.pop("state")
                row.pop("log")
                rows.append(row)
                if progress:
                    progress(row, time.perf_counter() - t0)
    return sorted(rows, key=lambda r: (r["sigma"], r["mode"], r["seed"]))


def format_sweep(rows) -> str:
    buf = io.StringIO()
    buf.write(SWEEP_HEADER + "\n")
    for r in rows:
        buf.write(f"{r['sigma']!r}\t{r['mode']}\t{r['seed']}\t{r['psnr']!r}\t{r['ssim']!r}\n")
    return buf.getvalue()


def parse_sweep(text: str) -> list:
    lines = text.strip("\n").split("\n")
    if lines[0] != SWEEP_HEADER:
        raise ValueError(f"unexpected sweep header {lines[0]!r}")
    rows = []
    for line in lines[1:]:
        s, mode, seed, p, q = line.split("\t")
        rows.append({"sigma": float(s), "mode": mode, "seed": int(seed), "psnr": float(p), "ssim": float(q)})
    return rows


def mean_by(rows, *keys) -> dict:
    groups: dict = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r["psnr"])
    return {k: float(np.mean(v)) for k, v in groups.items()}
