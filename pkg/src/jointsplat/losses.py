"""Photometric, silhouette and regularisation losses.

Every term is a torch scalar so gradients come from autograd; images are
``[H, W, 3]`` linear RGB and masks ``[H, W]``.  Pixel terms are means (not
sums) so the weights do not depend on the image size.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, fields

import numpy as np
import torch
import torch.nn.functional as F
from scipy.spatial import cKDTree

from .geometry import DTYPE, as_tensor

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2

# order of the columns in reports and metric logs
TERMS = ("rgb", "ssim", "lpips", "mask", "lbs", "canonical", "dyn", "background", "human")


@dataclass(frozen=True)
class LossWeights:
    rgb: float = 1.0
    ssim: float = 0.4
    lpips: float = 0.2  # only active when a perceptual plugin is registered
    mask: float = 0.01
    lbs: float = 20.0
    smpl: float = 0.005  # weight of the canonical anchoring term
    dyn: float = 0.01
    background: float = 1.0
    human: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"loss weight {f.name} must be finite and >= 0, got {v}")

    def of(self, term: str) -> float:
        return self.smpl if term == "canonical" else getattr(self, term)


def _check_same(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _mask3(mask: torch.Tensor, img: torch.Tensor) -> torch.Tensor:
    if mask.shape != img.shape[:-1]:
        raise ValueError(f"mask shape {tuple(mask.shape)} does not match image {tuple(img.shape)}")
    return mask[..., None]


def l1(a, b) -> torch.Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "l1")
    return (a - b).abs().mean()


def background_loss(image, render_bg, mask) -> torch.Tensor:
    """Static-region photometric error: ``mean((1 - M) |I - I_B|)``."""
    image, render_bg, mask = as_tensor(image), as_tensor(render_bg), as_tensor(mask)
    _check_same(image, render_bg, "background_loss")
    return ((1.0 - _mask3(mask, image)) * (image - render_bg).abs()).mean()


def human_loss(image, render_h, mask, render_mask) -> torch.Tensor:
    """``mean(M |I - I_H|) + mean(|M - M_H|)``."""
    image, render_h = as_tensor(image), as_tensor(render_h)
    mask, render_mask = as_tensor(mask), as_tensor(render_mask)
    _check_same(image, render_h, "human_loss")
    _check_same(mask, render_mask, "human_loss mask")
    return (_mask3(mask, image) * (image - render_h).abs()).mean() + (mask - render_mask).abs().mean()


def mask_mse(render_mask, mask) -> torch.Tensor:
    render_mask, mask = as_tensor(render_mask), as_tensor(mask)
    _check_same(render_mask, mask, "mask_mse")
    return ((render_mask - mask) ** 2).mean()


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> torch.Tensor:
    x = torch.arange(size, dtype=DTYPE) - (size - 1) / 2.0
    g = torch.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _blur(x: torch.Tensor, win: torch.Tensor) -> torch.Tensor:
    # x: [C, H, W]; separable filter with edge replication
    r = win.numel() // 2
    c = x.shape[0]
    x = F.pad(x[None], (r, r, r, r), mode="replicate")
    x = F.conv2d(x, win.view(1, 1, 1, -1).expand(c, 1, 1, -1), groups=c)
    x = F.conv2d(x, win.view(1, 1, -1, 1).expand(c, 1, -1, 1), groups=c)
    return x[0]


def ssim_map(a, b) -> torch.Tensor:
    """Per-pixel, per-channel SSIM, ``[H, W, C]``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "ssim")
    win = gaussian_window()
    x, y = a.permute(2, 0, 1), b.permute(2, 0, 1)
    mx, my = _blur(x, win), _blur(y, win)
    sxx = _blur(x * x, win) - mx * mx
    syy = _blur(y * y, win) - my * my
    sxy = _blur(x * y, win) - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
    return (num / den).permute(1, 2, 0)


def ssim(a, b) -> torch.Tensor:
    return ssim_map(a, b).mean()


# perceptual plugin: callable (rendered, target) -> scalar tensor
_perceptual = None
_warned = False


def register_perceptual(fn):
    """Install (or with ``None`` remove) the perceptual loss plugin."""
    global _perceptual, _warned
    _perceptual = fn
    _warned = False


def perceptual_plugin():
    return _perceptual


def render_terms(image, render, weights: LossWeights | None = None) -> dict:
    """Unweighted ``rgb`` (L1), ``ssim`` (1 - SSIM) and, with a plugin, ``lpips``."""
    global _warned
    image, render = as_tensor(image), as_tensor(render)
    _check_same(image, render, "render_loss")
    terms = {"rgb": l1(render, image), "ssim": 1.0 - ssim(render, image)}
    weights = weights or LossWeights()
    if _perceptual is not None:
        terms["lpips"] = _perceptual(render, image)
    elif weights.lpips > 0 and not _warned:
        warnings.warn("no perceptual plugin registered; skipping the lpips term", stacklevel=2)
        _warned = True
    return terms


def render_loss(image, render, weights: LossWeights | None = None) -> torch.Tensor:
    weights = weights or LossWeights()
    terms = render_terms(image, render, weights)
    return sum(weights.of(k) * v for k, v in terms.items())


def lbs_loss(weights, weights_init) -> torch.Tensor:
    return ((weights - weights_init) ** 2).sum()


def dynamics_loss(dmu, drot, dc) -> torch.Tensor:
    """``sum ||dmu||^2 + ||dR - I||_F^2 + ||dc||^2`` over the batch."""
    eye = torch.eye(3, dtype=drot.dtype)
    return (dmu**2).sum() + ((drot - eye) ** 2).sum() + (dc**2).sum()


class NearestVertex:
    """Exact nearest-vertex lookup for the canonical anchoring term."""

    def __init__(self, vertices):
        self.vertices = np.asarray(vertices, dtype=np.float64)
        self.tree = cKDTree(self.vertices)
        self._v = as_tensor(self.vertices)

    def __call__(self, means: torch.Tensor) -> torch.Tensor:
        _, idx = self.tree.query(means.detach().numpy(), k=1)
        return ((means - self._v[torch.as_tensor(idx)]) ** 2).sum()


def canonical_loss(means, vertices) -> torch.Tensor:
    """``sum_i min_j ||mu_i - v_j||^2``."""
    lookup = vertices if isinstance(vertices, NearestVertex) else NearestVertex(vertices)
    return lookup(as_tensor(means))


@dataclass
class LossReport:
    terms: dict  # unweighted scalar tensors, keyed by TERMS
    weights: LossWeights
    total: torch.Tensor

    def contribution(self, term: str) -> float:
        return self.weights.of(term) * float(self.terms[term])

    def values(self) -> dict:
        """Plain floats for every term (NaN where inactive) plus the total."""
        out = {k: float(self.terms[k].detach()) if k in self.terms else float("nan") for k in TERMS}
        out["total"] = float(self.total.detach())
        return out


def total_loss(terms: dict, weights: LossWeights | None = None) -> LossReport:
    """Weighted sum of whatever terms the current stage computed."""
    weights = weights or LossWeights()
    unknown = set(terms) - set(TERMS)
    if unknown:
        raise ValueError(f"unknown loss terms {sorted(unknown)}")
    total = torch.zeros((), dtype=DTYPE)
    for k in TERMS:
        if k in terms:
            total = total + weights.of(k) * terms[k]
    return LossReport(dict(terms), weights, total)
