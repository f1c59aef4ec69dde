"""Differentiable Gaussian splatting on the CPU.

Forward pass: cull means behind the near plane or well outside the field
of view, project, build screen-space covariances ``J W Sigma W^T J^T + 0.3 I``,
enumerate (pixel, Gaussian) pairs inside the 3-sigma ellipse, and
alpha-composite front to back with a global depth sort.  Transmittance is
accumulated as a running sum of ``log(1 - alpha)``.
Gradients come from torch autograd over that float64 graph;
``rasterize_backward`` exposes them per input for a given image gradient.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import torch

from .body import BodyParams, Skeleton, forward_kinematics, lbs_deform
from .dynamics import TemporalNet, apply_offsets
from .gaussians import GaussianSet, build_covariance, eval_sh
from .geometry import DTYPE, NEAR_PLANE, CameraState, as_tensor, camera_pose_t

DILATION = 0.3  # px^2 low-pass added to every screen-space covariance
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
SIGMA_CUTOFF = 3.0
MIN_DET = 1e-12
FRUSTUM_MARGIN = 1.3  # cull means projecting beyond 1.3x the half field of view

MODES = ("full", "human", "human_only_white", "background_only")

_tokens = itertools.count()


@dataclass
class ImageBuffer:
    rgb: torch.Tensor  # [H, W, 3], linear
    alpha: torch.Tensor  # [H, W]
    depth: torch.Tensor | None = None  # [H, W], alpha-weighted

    @property
    def height(self) -> int:
        return int(self.rgb.shape[0])

    @property
    def width(self) -> int:
        return int(self.rgb.shape[1])

    def detach(self) -> ImageBuffer:
        return ImageBuffer(self.rgb.detach(), self.alpha.detach(),
                           None if self.depth is None else self.depth.detach())


@dataclass
class SplatWorkspace:
    token: int
    inputs: dict
    image: ImageBuffer
    means2d: torch.Tensor  # [N, 2], NaN for culled Gaussians
    cov2d: torch.Tensor  # [N, 2, 2]
    depths: torch.Tensor  # [N]
    culled: torch.Tensor  # [N] bool
    pair_pixel: torch.Tensor  # blending records in compositing order
    pair_gaussian: torch.Tensor
    extras: dict = field(default_factory=dict)


def _empty_image(h, w, background, dtype=DTYPE):
    bg = as_tensor(background)
    return ImageBuffer(bg.expand(h, w, 3).clone(), torch.zeros(h, w, dtype=dtype), torch.zeros(h, w, dtype=dtype))


def rasterize(means, covs, opacities, colors, camera: CameraState, background=(0.0, 0.0, 0.0),
              correction: torch.Tensor | None = None, near: float = NEAR_PLANE):
    """Render world-space Gaussians; returns ``(ImageBuffer, SplatWorkspace)``.

    ``colors`` are clamped to [0, 1] here.  ``correction`` (6-vector) replaces
    ``camera.correction`` so that it can carry gradients.
    """
    k = camera.intrinsics
    h, w = k.height, k.width
    n = means.shape[0]
    if correction is None:
        correction = as_tensor(camera.correction)
    rot, trans = camera_pose_t(camera, correction)
    bg = as_tensor(background)
    inputs = {"means": means, "covs": covs, "opacities": opacities, "colors": colors, "correction": correction}

    p_cam = means @ rot.T + trans
    with torch.no_grad():
        zc = p_cam[:, 2]
        lim_x = FRUSTUM_MARGIN * max(k.cx + 0.5, w - 0.5 - k.cx) / k.fx
        lim_y = FRUSTUM_MARGIN * max(k.cy + 0.5, h - 0.5 - k.cy) / k.fy
        visible = ((zc > near) & (p_cam[:, 0].abs() <= lim_x * zc) & (p_cam[:, 1].abs() <= lim_y * zc))
    vis = torch.nonzero(visible).flatten()
    pc = p_cam[vis]
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    zero = torch.zeros_like(z)
    jac = torch.stack([
        torch.stack([k.fx / z, zero, -k.fx * x / (z * z)], -1),
        torch.stack([zero, k.fy / z, -k.fy * y / (z * z)], -1),
    ], -2)
    m = jac @ rot
    cov2d = m @ covs[vis] @ m.transpose(-1, -2) + DILATION * torch.eye(2, dtype=DTYPE)
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    mean2d = torch.stack([k.fx * x / z + k.cx, k.fy * y / z + k.cy], -1)

    with torch.no_grad():
        ext_x = SIGMA_CUTOFF * torch.sqrt(a.clamp_min(0))
        ext_y = SIGMA_CUTOFF * torch.sqrt(c.clamp_min(0))
        x0 = torch.ceil(mean2d[:, 0] - ext_x).clamp(0, w - 1).to(torch.int64)
        x1 = torch.floor(mean2d[:, 0] + ext_x).clamp(-1, w - 1).to(torch.int64)
        y0 = torch.ceil(mean2d[:, 1] - ext_y).clamp(0, h - 1).to(torch.int64)
        y1 = torch.floor(mean2d[:, 1] + ext_y).clamp(-1, h - 1).to(torch.int64)
        bw, bh = (x1 - x0 + 1).clamp_min(0), (y1 - y0 + 1).clamp_min(0)
        keep = (det > MIN_DET) & (bw > 0) & (bh > 0)
        kept = torch.nonzero(keep).flatten()
        order = kept[torch.sort(z.detach()[kept], stable=True).indices]

    means2d_all = torch.full((n, 2), float("nan"), dtype=DTYPE)
    cov2d_all = torch.full((n, 2, 2), float("nan"), dtype=DTYPE)
    depths_all = torch.full((n,), float("nan"), dtype=DTYPE)
    means2d_all[vis] = mean2d.detach()
    cov2d_all[vis] = cov2d.detach()
    depths_all[vis] = z.detach()
    culled = torch.ones(n, dtype=torch.bool)
    culled[vis[kept]] = False

    def workspace(image, pix, gid, **extras):
        return image, SplatWorkspace(next(_tokens), inputs, image, means2d_all, cov2d_all, depths_all,
                                     culled, pix, gid, extras)

    if len(order) == 0:
        return workspace(_empty_image(h, w, bg), torch.zeros(0, dtype=torch.int64), torch.zeros(0, dtype=torch.int64))

    # per-Gaussian table gathered once per pair: mean, inverse cov, opacity, colour, depth
    inv_det = 1.0 / det
    tab = torch.cat([mean2d, torch.stack([c * inv_det, -b * inv_det, a * inv_det, opacities[vis]], -1)], -1)
    look = torch.cat([colors[vis].clamp(0.0, 1.0), z[:, None]], -1)

    # enumerate candidate pairs Gaussian-major (so depth-ordered per pixel)
    with torch.no_grad():
        counts = bw[order] * bh[order]
        g = torch.repeat_interleave(torch.arange(len(order)), counts)
        local = torch.arange(int(counts.sum())) - torch.repeat_interleave(torch.cumsum(counts, 0) - counts, counts)
        ix = torch.stack([x0[order], bw[order], y0[order], order], -1)[g]
        px = ix[:, 0] + local % ix[:, 1]
        py = ix[:, 2] + local // ix[:, 1]
        src = ix[:, 3]
        maha, a_raw = _pair_alpha(tab.detach()[src], px, py)
        sel = (maha <= SIGMA_CUTOFF**2) & (a_raw.clamp(max=ALPHA_MAX) >= ALPHA_MIN)
        src, px, py = src[sel], px[sel], py[sel]
        pix = py * w + px
        pix, perm = torch.sort(pix, stable=True)
        src, px, py = src[perm], px[perm], py[perm]

    if len(src) == 0:
        return workspace(_empty_image(h, w, bg), pix, vis[src])

    # differentiable recomputation on the surviving pairs
    pt = tab[src]
    _, alpha = _pair_alpha(pt, px, py)
    alpha = alpha.clamp(max=ALPHA_MAX)

    with torch.no_grad():
        per_pixel = torch.bincount(pix, minlength=h * w)
        starts = torch.cumsum(per_pixel, 0) - per_pixel
        slot = torch.arange(len(pix)) - starts[pix]
        depth_len = int(per_pixel.max())
        flat = pix * depth_len + slot
    # transmittance as exp of a running sum of log(1 - alpha), one row per pixel
    log_t = torch.log1p(-alpha)
    cum = torch.zeros(h * w * depth_len, dtype=DTYPE).index_put((flat,), log_t).view(h * w, depth_len).cumsum(1)
    weight = alpha * torch.exp(cum.view(-1)[flat] - log_t)
    t_final = torch.exp(cum[:, -1])
    acc = torch.zeros(h * w, 4, dtype=DTYPE).index_add(0, pix, weight[:, None] * look[src])
    rgb = acc[:, :3] + t_final[:, None] * bg
    image = ImageBuffer(rgb.view(h, w, 3), (1.0 - t_final).view(h, w), acc[:, 3].view(h, w))
    return workspace(image, pix, vis[src], slot=slot)


def _pair_alpha(pt, px, py):
    mx, my, ia, ib, ic, op = pt.unbind(1)
    dx = px.to(DTYPE) - mx
    dy = py.to(DTYPE) - my
    maha = ia * dx * dx + 2.0 * ib * dx * dy + ic * dy * dy
    return maha, op * torch.exp(-0.5 * maha)


def rasterize_backward(ws: SplatWorkspace, d_rgb, d_alpha=None, d_depth=None) -> dict:
    """Gradients of ``<d_rgb, rgb> + <d_alpha, alpha> + <d_depth, depth>``.

    Returns one gradient per rasterizer input (means, covs, opacities,
    colors, correction); inputs that do not require grad get zeros.
    """
    img = ws.image
    d_rgb = as_tensor(d_rgb)
    if d_rgb.shape != img.rgb.shape:
        raise ValueError(f"image gradient shape {tuple(d_rgb.shape)} does not match workspace "
                         f"{tuple(img.rgb.shape)}")
    outs, grads = [img.rgb], [d_rgb]
    for out, g in ((img.alpha, d_alpha), (img.depth, d_depth)):
        if g is not None:
            g = as_tensor(g)
            if g.shape != out.shape:
                raise ValueError(f"gradient shape {tuple(g.shape)} does not match {tuple(out.shape)}")
            outs.append(out)
            grads.append(g)
    names = [k for k, v in ws.inputs.items() if v.requires_grad]
    result = {k: torch.zeros_like(v) for k, v in ws.inputs.items()}
    live = [(o, g) for o, g in zip(outs, grads) if o.requires_grad]
    if names and live:
        got = torch.autograd.grad([o for o, _ in live], [ws.inputs[k] for k in names],
                                  [g for _, g in live], retain_graph=True, allow_unused=True)
        for k, v in zip(names, got):
            if v is not None:
                result[k] = v
    return result


def camera_center_t(camera: CameraState, correction: torch.Tensor | None = None) -> torch.Tensor:
    rot, trans = camera_pose_t(camera, correction)
    return -rot.T @ trans


def shade(sh, means, center, degree: int, residual=None):
    dirs = means - center
    dirs = dirs / dirs.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    col = eval_sh(sh, dirs, degree)
    return col if residual is None else col + residual


@dataclass
class FramePose:
    theta: torch.Tensor  # [K, 3]
    trans: torch.Tensor  # [3]
    beta: torch.Tensor  # [K]

    @classmethod
    def of(cls, body: BodyParams, frame: int) -> FramePose:
        return cls(body.theta[frame], body.trans[frame], body.beta)

    def detach(self) -> FramePose:
        return FramePose(self.theta.detach(), self.trans.detach(), self.beta.detach())


@dataclass
class PosedHuman:
    means: torch.Tensor
    rotations: torch.Tensor
    covs: torch.Tensor
    color_residual: torch.Tensor | None
    joints: torch.Tensor


def pose_human(human: GaussianSet, skeleton: Skeleton, pose: FramePose, net: TemporalNet | None = None,
               t: float = 0.0, dynamics: bool = True, residuals=None) -> PosedHuman:
    """Skin the canonical set to ``pose`` and add the temporal residuals.

    ``residuals`` = ``(dmu, dR, dc)`` skips evaluating ``net``.
    """
    fk = forward_kinematics(skeleton, pose.theta, pose.trans, pose.beta)
    mu, rot, cov = lbs_deform(human, fk)
    if residuals is None and dynamics and net is not None:
        residuals = net(human.means, t)
    dc = None
    if dynamics and residuals is not None:
        dmu, drot, dc = residuals
        mu, rot = apply_offsets(mu, rot, dmu, drot)
        cov = build_covariance(rot, human.scales())
    return PosedHuman(mu, rot, cov, dc, fk.joints)


def render_composite(human: GaussianSet, background: GaussianSet, skeleton: Skeleton, pose: FramePose,
                     net: TemporalNet | None, camera: CameraState, t: float, mode: str = "full",
                     correction: torch.Tensor | None = None, dynamics: bool = True,
                     clear_color=(0.0, 0.0, 0.0), posed: PosedHuman | None = None):
    """Render one frame.

    ``full`` rasterizes the posed human and the background in one
    depth-sorted pass over ``clear_color``; ``human`` renders the human alone
    over black, ``human_only_white`` over white; ``background_only`` renders
    the static set over ``clear_color``.
    """
    if mode not in MODES:
        raise ValueError(f"unknown render mode {mode!r}; expected one of {MODES}")
    if correction is None:
        correction = as_tensor(camera.correction)
    center = camera_center_t(camera, correction)
    parts = []
    if mode != "background_only":
        if posed is None:
            posed = pose_human(human, skeleton, pose, net, t, dynamics)
        col = shade(human.sh, posed.means, center, human.sh_degree, posed.color_residual)
        parts.append((posed.means, posed.covs, human.opacities(), col))
    if mode in ("full", "background_only") and background is not None and background.count:
        col = shade(background.sh, background.means, center, background.sh_degree)
        parts.append((background.means, background.covariances(), background.opacities(), col))
    clear = {"human": (0.0, 0.0, 0.0), "human_only_white": (1.0, 1.0, 1.0)}.get(mode, clear_color)
    if not parts:
        empty = torch.zeros(0, 3, dtype=DTYPE)
        return rasterize(empty, torch.zeros(0, 3, 3, dtype=DTYPE), torch.zeros(0, dtype=DTYPE), empty,
                         camera, clear, correction)
    means, covs, opac, cols = (torch.cat(x) for x in zip(*parts))
    return rasterize(means, covs, opac, cols, camera, clear, correction)
