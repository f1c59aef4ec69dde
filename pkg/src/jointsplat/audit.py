"""Finite-difference audit of every gradient the optimiser relies on."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

from .body import Skeleton
from .dynamics import HashGridConfig, TemporalNet, TemporalNetConfig
from .gaussians import GaussianSet, init_background_gaussians, init_human_gaussians
from .geometry import DTYPE, CameraIntrinsics, CameraState, as_tensor, look_at
from .losses import mask_mse, ssim
from .render import FramePose, pose_human, render_composite

# parameter class -> (owner, attribute)
CLASSES = (
    "human.means", "human.log_scales", "human.quats", "human.opacity_logits", "human.sh", "human.lbs_logits",
    "background.means", "background.log_scales", "background.quats", "background.opacity_logits",
    "background.sh", "body.theta", "body.trans", "body.beta", "camera.correction",
    "net.offset", "net.color", "net.table",
)


@dataclass
class AuditScene:
    skeleton: Skeleton
    human: GaussianSet
    background: GaussianSet
    net: TemporalNet
    camera: CameraState
    theta: torch.Tensor
    trans: torch.Tensor
    beta: torch.Tensor
    correction: torch.Tensor
    target: torch.Tensor
    target_mask: torch.Tensor
    t: float = 0.37


def audit_scene(size: int = 16, seed: int = 0) -> AuditScene:
    """A three-joint limb in front of a small textured wall."""
    rng = np.random.default_rng(seed)
    skel = Skeleton.chain(3, bone_length=0.3, radius=0.06, seed=seed, vertices_per_area=400.0)
    human = init_human_gaussians(skel, 24, seed=seed, sh_degree=1)
    human.opacity_logits = as_tensor(rng.normal(0.5, 0.5, human.count))
    human.sh = human.sh + as_tensor(rng.normal(0, 0.1, tuple(human.sh.shape)))
    human.quats = as_tensor(rng.normal(size=(human.count, 4)))
    human.log_scales = human.log_scales + as_tensor(rng.normal(0, 0.3, (human.count, 3)))
    human.lbs_logits = human.lbs_logits + as_tensor(rng.normal(0, 0.3, tuple(human.lbs_logits.shape)))
    pts = np.c_[rng.uniform(-0.5, 0.5, 24), rng.uniform(-0.1, 0.9, 24), rng.uniform(-0.6, -0.4, 24)]
    bg = init_background_gaussians(pts, rng.uniform(0.2, 0.8, (24, 3)), sh_degree=1)
    bg.quats = as_tensor(rng.normal(size=(bg.count, 4)))
    bg.log_scales = bg.log_scales + as_tensor(rng.normal(0, 0.3, (bg.count, 3)))
    bg.opacity_logits = as_tensor(rng.normal(0.0, 0.5, bg.count))
    grid = HashGridConfig(levels=2, table_size=256, features=2, base_resolution=4, growth=2.0)
    net = TemporalNet(TemporalNetConfig(hash_grid=grid, hidden=8, time_octaves=2, seed=seed))
    net.randomize_heads(0.05, seed)
    with torch.no_grad():
        net.table.copy_(torch.randn(net.table.shape, generator=torch.Generator().manual_seed(seed),
                                    dtype=DTYPE) * 0.1)
    f = 1.4 * size
    cam = CameraState(CameraIntrinsics(f, f, (size - 1) / 2, (size - 1) / 2, size, size),
                      look_at((0.3, 0.45, 2.0), (0.0, 0.45, 0.0)))
    k = skel.num_joints
    return AuditScene(
        skeleton=skel, human=human, background=bg, net=net, camera=cam,
        theta=as_tensor(rng.normal(0, 0.3, (k, 3))), trans=as_tensor(rng.normal(0, 0.02, 3)),
        beta=as_tensor(rng.uniform(0.9, 1.1, k)), correction=as_tensor(rng.normal(0, 0.01, 6)),
        target=as_tensor(rng.uniform(0, 1, (size, size, 3))), target_mask=as_tensor(rng.uniform(0, 1, (size, size))),
    )


def audit_params(scene: AuditScene) -> dict:
    """Name -> list of leaf tensors, one entry per parameter class."""
    h, b, net = scene.human, scene.background, scene.net
    out = {f"human.{k}": [getattr(h, k)] for k in GaussianSet.PARAMS}
    out.update({f"background.{k}": [getattr(b, k)] for k in GaussianSet.PARAMS if k != "lbs_logits"})
    out.update({"body.theta": [scene.theta], "body.trans": [scene.trans], "body.beta": [scene.beta],
                "camera.correction": [scene.correction],
                "net.offset": list(net.offset.parameters()), "net.color": list(net.color.parameters()),
                "net.table": [net.table]})
    return out


def audit_loss(scene: AuditScene) -> torch.Tensor:
    """Smooth objective over the full and human-only renders.

    Squared error stands in for L1 here so the difference quotient is not
    spoiled by the kink at zero; the chain rule through the renderer is the
    same.
    """
    pose = FramePose(scene.theta, scene.trans, scene.beta)
    posed = pose_human(scene.human, scene.skeleton, pose, scene.net, scene.t)
    args = (scene.human, scene.background, scene.skeleton, pose, scene.net, scene.camera, scene.t)
    full, _ = render_composite(*args, "full", correction=scene.correction, posed=posed)
    hum, _ = render_composite(*args, "human", correction=scene.correction, posed=posed)
    return (((full.rgb - scene.target) ** 2).mean() + 0.4 * (1.0 - ssim(full.rgb, scene.target))
            + mask_mse(hum.alpha, scene.target_mask))


def _pick(grad: torch.Tensor, count: int, rng: np.random.Generator) -> np.ndarray:
    g = grad.abs().flatten().numpy()
    nz = np.flatnonzero(g > 0)
    top = nz[np.argsort(-g[nz])[: count // 2]]
    rest = np.setdiff1d(nz, top)
    extra = rng.choice(rest, size=min(len(rest), count - len(top)), replace=False) if len(rest) else []
    return np.sort(np.r_[top, extra].astype(np.int64))


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _difference(f, flat, idx, steps, agree):
    """Central difference that steps around the loss's jump discontinuities.

    The rasterizer drops contributions below an opacity threshold and
    outside the 3-sigma ellipse, so the loss is only piecewise smooth.  A
    step is accepted when halving it changes the quotient by less than
    ``agree`` (relative, plus 1e-9 absolute for rounding noise); otherwise a
    smaller step is tried.  Returns
    ``(quotient, resolved)``.
    """
    old = float(flat[idx])

    def quotient(h):
        with torch.no_grad():
            flat[idx] = old + h
            up = float(f())
            flat[idx] = old - h
            down = float(f())
            flat[idx] = old
        return (up - down) / (2 * h)

    last = None
    for h in steps:
        a, b = quotient(h), quotient(h / 2)
        last = b
        if abs(a - b) <= agree * max(abs(a), abs(b)) + 1e-9:
            return b, True
    return last, False


def gradcheck(size: int = 16, seed: int = 0, steps=(1e-6, 1e-7, 1e-8), per_class: int = 8,
              floor: float = 1e-6, classes=CLASSES) -> dict:
    """Compare autograd with central differences for every parameter class.

    Returns ``{class: {"max_rel", "checked", "unresolved", "max_abs_grad"}}``
    plus a ``"_runtime"`` entry in seconds.  ``unresolved`` counts entries
    where no step size gave a stable quotient; they count as failures.
    """
    t0 = time.perf_counter()
    scene = audit_scene(size, seed)
    params = audit_params(scene)
    leaves = [p for name in classes for p in params[name]]
    for p in leaves:
        p.requires_grad_(True)
    grads = torch.autograd.grad(audit_loss(scene), leaves, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(leaves, grads)]
    rng = np.random.default_rng(seed)
    f = lambda: audit_loss(scene)
    report = {}
    i = 0
    for name in classes:
        worst, checked, bad, gmax = 0.0, 0, 0, 0.0
        for p in params[name]:
            g = grads[i]
            i += 1
            gmax = max(gmax, float(g.abs().max()) if g.numel() else 0.0)
            flat = p.data.view(-1)
            for idx in _pick(g, per_class, rng):
                numeric, ok = _difference(f, flat, idx, steps, 1e-4)
                bad += not ok
                worst = max(worst, relative_error(float(g.view(-1)[idx]), numeric, floor))
                checked += 1
        report[name] = {"max_rel": worst, "checked": checked, "unresolved": bad, "max_abs_grad": gmax}
    report["_runtime"] = time.perf_counter() - t0
    return report


def passed(report: dict, tol: float = 1e-3) -> bool:
    rows = [r for k, r in report.items() if not k.startswith("_")]
    return all(r["checked"] > 0 and r["unresolved"] == 0 and r["max_rel"] < tol for r in rows)


def format_report(report: dict) -> str:
    lines = [f"{'parameter':<28}{'checked':>8}{'unstable':>9}{'max |grad|':>14}{'max rel err':>14}"]
    for name, r in report.items():
        if name.startswith("_"):
            continue
        lines.append(f"{name:<28}{r['checked']:>8}{r['unresolved']:>9}{r['max_abs_grad']:>14.3e}{r['max_rel']:>14.3e}")
    lines.append(f"runtime {report['_runtime']:.1f}s")
    return "\n".join(lines)
