import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from jointsplat import losses
from jointsplat.geometry import DTYPE, as_tensor
from jointsplat.losses import (SSIM_C1, TERMS, LossWeights, background_loss, canonical_loss, dynamics_loss,
                               human_loss, lbs_loss, mask_mse, render_loss, render_terms, ssim, total_loss)


def img(seed, h=8, w=8):
    return as_tensor(np.random.default_rng(seed).uniform(0, 1, (h, w, 3)))


def test_background_loss_examples():
    a, b = img(0), img(1)
    assert float(background_loss(a, a, torch.zeros(8, 8))) == 0.0
    assert float(background_loss(a, b, torch.ones(8, 8))) == 0.0
    one = background_loss(torch.zeros(1, 1, 3), torch.ones(1, 1, 3), torch.zeros(1, 1))
    assert float(one) == 1.0
    with pytest.raises(ValueError):
        background_loss(a, torch.zeros(4, 4, 3), torch.zeros(8, 8))


def test_human_loss_examples():
    a = img(0)
    m = torch.rand(8, 8, dtype=DTYPE)
    assert float(human_loss(a, a, m, m)) == 0.0
    assert float(human_loss(a, a, torch.ones(8, 8, dtype=DTYPE), torch.zeros(8, 8, dtype=DTYPE))) == 1.0
    with pytest.raises(ValueError):
        human_loss(a, a, m, torch.zeros(4, 4))


def test_human_loss_pixel_gradient_matches_fd():
    a, r = img(0), img(1)
    m, rm = torch.rand(8, 8, dtype=DTYPE), torch.rand(8, 8, dtype=DTYPE)
    r.requires_grad_(True)
    (g,) = torch.autograd.grad(human_loss(a, r, m, rm), r)
    h = 1e-6
    for idx in [(0, 0, 0), (3, 5, 1), (7, 2, 2)]:
        e = torch.zeros_like(r)
        e[idx] = h
        fd = (float(human_loss(a, r.detach() + e, m, rm)) - float(human_loss(a, r.detach() - e, m, rm))) / (2 * h)
        assert abs(fd - float(g[idx])) < 1e-6


def test_render_loss_examples():
    a = img(0)
    assert float(render_loss(a, a)) == 0.0
    zero, tenth = torch.zeros(16, 16, 3, dtype=DTYPE), torch.full((16, 16, 3), 0.1, dtype=DTYPE)
    terms = render_terms(zero, tenth)
    assert abs(float(terms["rgb"]) - 0.1) < 1e-15
    with pytest.raises(ValueError):
        render_loss(a, torch.zeros(4, 4, 3))


def test_constant_image_ssim_closed_form():
    a = torch.zeros(16, 16, 3, dtype=DTYPE)
    b = torch.ones(16, 16, 3, dtype=DTYPE)
    # variances vanish, so SSIM = C1 / (1 + C1)
    assert abs(float(ssim(a, b)) - SSIM_C1 / (1 + SSIM_C1)) < 1e-12


@given(st.integers(0, 10_000))
def test_ssim_identity_and_symmetry(seed):
    a, b = img(seed), img(seed + 1)
    assert abs(float(ssim(a, a)) - 1.0) < 1e-12
    assert abs(float(ssim(a, b)) - float(ssim(b, a))) < 1e-9


def _fd(f, x, idxs, h=1e-6):
    x = x.clone().requires_grad_(True)
    (g,) = torch.autograd.grad(f(x), x)
    for idx in idxs:
        e = torch.zeros_like(x)
        e[idx] = h
        fd = (float(f(x.detach() + e)) - float(f(x.detach() - e))) / (2 * h)
        assert abs(fd - float(g[idx])) <= 1e-4 * max(abs(fd), 1e-6)


def test_loss_gradients_match_fd():
    a, b = img(2), img(3)
    m = torch.rand(8, 8, dtype=DTYPE, generator=torch.Generator().manual_seed(0))
    idxs = [(1, 1, 0), (4, 6, 2), (7, 0, 1)]
    _fd(lambda x: 1 - ssim(x, b), a, idxs)
    _fd(lambda x: render_terms(x, b)["rgb"], a, idxs)
    _fd(lambda x: background_loss(b, x, m), a, idxs)
    _fd(lambda x: mask_mse(x, m), a[..., 0], [(1, 1), (5, 2)])


def test_regulariser_fixed_points():
    w = torch.softmax(torch.randn(10, 4, dtype=DTYPE), -1)
    assert float(lbs_loss(w, w)) == 0.0
    eye = torch.eye(3, dtype=DTYPE).expand(5, 3, 3)
    assert float(dynamics_loss(torch.zeros(5, 3, dtype=DTYPE), eye, torch.zeros(5, 3, dtype=DTYPE))) == 0.0


def test_canonical_loss_single_gaussian():
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 3, 0]], dtype=float)
    mu = as_tensor([[0.9, 0.2, 0.1]])
    d2 = 0.1**2 + 0.2**2 + 0.1**2
    assert abs(float(canonical_loss(mu, verts)) - d2) < 1e-14


def test_canonical_loss_matches_brute_force():
    rng = np.random.default_rng(0)
    verts, mu = rng.normal(size=(200, 3)), rng.normal(size=(50, 3))
    brute = (np.linalg.norm(mu[:, None] - verts[None], axis=2).min(1) ** 2).sum()
    assert abs(float(canonical_loss(as_tensor(mu), verts)) - brute) < 1e-9


def test_total_loss_bookkeeping():
    assert float(total_loss({k: torch.zeros((), dtype=DTYPE) for k in TERMS if k != "lpips"}).total) == 0.0
    rng = np.random.default_rng(0)
    terms = {k: as_tensor(rng.uniform()) for k in ("rgb", "ssim", "mask", "lbs", "canonical", "dyn")}
    w = LossWeights()
    rep = total_loss(terms, w)
    assert abs(float(rep.total) - sum(rep.contribution(k) for k in terms)) < 1e-9
    doubled = total_loss(terms, LossWeights(lbs=2 * w.lbs))
    assert doubled.contribution("lbs") == 2 * rep.contribution("lbs")
    assert np.isnan(rep.values()["human"])
    with pytest.raises(ValueError):
        total_loss({"bogus": torch.zeros(())})


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        LossWeights(rgb=-1.0)
    with pytest.raises(ValueError):
        LossWeights(dyn=float("nan"))


def test_perceptual_plugin_hook():
    a, b = img(0), img(1)
    losses.register_perceptual(lambda r, t: (r - t).pow(2).mean())
    try:
        terms = render_terms(a, b)
        assert "lpips" in terms and float(terms["lpips"]) > 0
    finally:
        losses.register_perceptual(None)
    assert "lpips" not in render_terms(a, b)


@given(st.integers(0, 10_000))
def test_losses_are_nonnegative(seed):
    a, b = img(seed), img(seed + 7)
    m, rm = torch.rand(8, 8, dtype=DTYPE), torch.rand(8, 8, dtype=DTYPE)
    for v in (background_loss(a, b, m), human_loss(a, b, m, rm), render_loss(a, b), mask_mse(m, rm)):
        assert float(v) >= 0
