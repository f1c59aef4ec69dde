import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from jointsplat.body import Skeleton
from jointsplat.dynamics import TemporalNet, TemporalNetConfig
from jointsplat.gaussians import init_background_gaussians, init_human_gaussians
from jointsplat.geometry import DTYPE, CameraIntrinsics, CameraState, RigidTransform, as_tensor, look_at
from jointsplat.render import (ALPHA_MAX, FramePose, rasterize, rasterize_backward, render_composite)


def cam(size=16, f=None):
    f = f or 1.5 * size
    return CameraState(CameraIntrinsics(f, f, (size - 1) / 2, (size - 1) / 2, size, size), RigidTransform.identity())


def splat(means, scales, opac, cols):
    means = as_tensor(means).reshape(-1, 3)
    n = means.shape[0]
    covs = torch.diag_embed(as_tensor(scales).reshape(n, 1).expand(n, 3) ** 2)
    return means, covs, as_tensor(opac).reshape(n), as_tensor(cols).reshape(n, 3)


def test_zero_gaussians_show_background():
    empty = torch.zeros(0, 3, dtype=DTYPE)
    img, _ = rasterize(empty, torch.zeros(0, 3, 3, dtype=DTYPE), torch.zeros(0, dtype=DTYPE), empty, cam(),
                       background=(1, 1, 1))
    assert torch.equal(img.rgb, torch.ones(16, 16, 3, dtype=DTYPE))
    assert torch.equal(img.alpha, torch.zeros(16, 16, dtype=DTYPE))


def test_saturated_splat():
    col = as_tensor([0.2, 0.7, 0.4])
    img, _ = rasterize(*splat([0, 0, 2], 10.0, 1.0, col), cam(15), background=(0.5, 0.5, 0.5))
    # the clamp leaves 1% transmittance, so the pixel is 0.99 c + 0.01 bg
    assert torch.allclose(img.rgb[7, 7], ALPHA_MAX * col + (1 - ALPHA_MAX) * 0.5, atol=1e-12)
    assert float((img.rgb[7, 7] - col).abs().max()) <= 1 / 255
    assert float(img.alpha[7, 7]) >= 0.99 - 1e-12


def test_two_layer_compositing_chain():
    g = splat([[0, 0, 2], [0, 0, 3]], [10.0, 10.0], [0.6, 1.0], [[1, 0, 0], [0, 0, 1]])
    img, _ = rasterize(*g, cam(15))
    expect = 0.6 * as_tensor([1, 0, 0]) + 0.4 * 0.99 * as_tensor([0, 0, 1])
    assert torch.allclose(img.rgb[7, 7], expect, atol=1e-12)


def test_occlusion_swap():
    cols = [[1, 0, 0], [0, 0, 1]]
    a, _ = rasterize(*splat([[0, 0, 2], [0, 0, 3]], [10.0, 10.0], [0.6, 0.8], cols), cam(15))
    b, _ = rasterize(*splat([[0, 0, 3], [0, 0, 2]], [10.0, 10.0], [0.6, 0.8], cols), cam(15))
    assert torch.allclose(a.rgb[7, 7], as_tensor([0.6, 0, 0.4 * 0.8]), atol=1e-12)
    assert torch.allclose(b.rgb[7, 7], as_tensor([0.2 * 0.6, 0, 0.8]), atol=1e-12)
    assert torch.allclose(a.alpha[7, 7], b.alpha[7, 7], atol=1e-12)


def _random_splats(rng, n):
    means = np.c_[rng.uniform(-0.6, 0.6, (n, 2)), rng.uniform(1.5, 3.0, n)]
    return splat(means, rng.uniform(0.03, 0.3, n), rng.uniform(0.1, 0.95, n), rng.uniform(0, 1, (n, 3)))


@settings(max_examples=25)
@given(st.integers(0, 10_000))
def test_adding_a_gaussian_never_lowers_alpha(seed):
    rng = np.random.default_rng(seed)
    m, c, o, col = _random_splats(rng, 12)
    base, _ = rasterize(m[:-1], c[:-1], o[:-1], col[:-1], cam())
    more, _ = rasterize(m, c, o, col, cam())
    assert float((more.alpha - base.alpha).min()) >= -1e-12


def test_render_is_deterministic():
    rng = np.random.default_rng(0)
    args = _random_splats(rng, 40)
    a, _ = rasterize(*args, cam(24))
    b, _ = rasterize(*args, cam(24))
    assert torch.equal(a.rgb, b.rgb) and torch.equal(a.alpha, b.alpha) and torch.equal(a.depth, b.depth)


def test_outputs_are_bounded():
    img, _ = rasterize(*_random_splats(np.random.default_rng(1), 60), cam(20), background=(0.3, 0.3, 0.3))
    assert torch.isfinite(img.rgb).all()
    assert float(img.alpha.min()) >= 0 and float(img.alpha.max()) <= 1


def test_behind_camera_gaussian_is_culled():
    img, ws = rasterize(*splat([0, 0, -2], 1.0, 0.9, [1, 1, 1]), cam())
    assert bool(ws.culled[0])
    assert float(img.alpha.max()) == 0.0


def test_zero_image_gradient_gives_zero_gradients():
    m, c, o, col = (t.clone().requires_grad_(True) for t in _random_splats(np.random.default_rng(2), 10))
    _, ws = rasterize(m, c, o, col, cam())
    grads = rasterize_backward(ws, torch.zeros(16, 16, 3, dtype=DTYPE), torch.zeros(16, 16, dtype=DTYPE))
    assert all(float(g.abs().max()) == 0.0 for g in grads.values())
    with pytest.raises(ValueError):
        rasterize_backward(ws, torch.zeros(8, 8, 3, dtype=DTYPE))


def test_opacity_gradient_matches_fd():
    m, c, _, col = splat([0.05, -0.02, 2], 0.2, 0.5, [0.3, 0.6, 0.9])
    o = as_tensor([0.5]).requires_grad_(True)
    img, ws = rasterize(m, c, o, col, cam())
    d = torch.zeros(16, 16, 3, dtype=DTYPE)
    d[8, 7, 1] = 1.0
    g = float(rasterize_backward(ws, d)["opacities"][0])
    h = 1e-6
    up = float(rasterize(m, c, as_tensor([0.5 + h]), col, cam())[0].rgb[8, 7, 1])
    dn = float(rasterize(m, c, as_tensor([0.5 - h]), col, cam())[0].rgb[8, 7, 1])
    fd = (up - dn) / (2 * h)
    assert abs(g - fd) <= 1e-4 * abs(fd)


def test_camera_correction_gradient_matches_fd():
    rng = np.random.default_rng(3)
    m, c, o, col = _random_splats(rng, 50)
    camera = cam(32)
    target = as_tensor(rng.uniform(0, 1, (32, 32, 3)))
    f = lambda corr: ((rasterize(m, c, o, col, camera, correction=corr)[0].rgb - target) ** 2).sum()
    corr = as_tensor(rng.normal(0, 0.01, 6)).requires_grad_(True)
    (g,) = torch.autograd.grad(f(corr), corr)
    for i in range(6):
        # step-halving central differences; see the audit module for why
        for h in (1e-6, 1e-7, 1e-8):
            qs = []
            for step in (h, h / 2):
                e = torch.zeros(6, dtype=DTYPE)
                e[i] = step
                qs.append((float(f(corr.detach() + e)) - float(f(corr.detach() - e))) / (2 * step))
            if abs(qs[0] - qs[1]) <= 1e-4 * max(abs(qs[0]), abs(qs[1])):
                break
        assert abs(float(g[i]) - qs[1]) <= 1e-3 * max(abs(qs[1]), 1e-6), (i, float(g[i]), qs)


def _human_scene(randomize=False):
    skel = Skeleton.chain(3, bone_length=0.3)
    human = init_human_gaussians(skel, 30, seed=0)
    bg = init_background_gaussians(np.c_[np.random.default_rng(0).uniform(-1, 1, (20, 2)), -np.ones(20)],
                                   np.full((20, 3), 0.5))
    net = TemporalNet(TemporalNetConfig(hidden=8))
    if randomize:
        net.randomize_heads(0.1)
    k = skel.num_joints
    pose = FramePose(torch.zeros(k, 3, dtype=DTYPE), torch.zeros(3, dtype=DTYPE), torch.ones(k, dtype=DTYPE))
    camera = CameraState(CameraIntrinsics(30, 30, 11.5, 11.5, 24, 24), look_at((0, 0.4, 2.5), (0, 0.4, 0)))
    return human, bg, skel, pose, net, camera


def test_zero_init_dynamics_is_exact_noop():
    args = _human_scene()
    on, _ = render_composite(*args, 0.4, "full", dynamics=True)
    off, _ = render_composite(*args, 0.4, "full", dynamics=False)
    assert float((on.rgb - off.rgb).abs().max().detach()) < 1e-12


def test_trained_dynamics_change_the_render():
    args = _human_scene(randomize=True)
    on, _ = render_composite(*args, 0.4, "full", dynamics=True)
    off, _ = render_composite(*args, 0.4, "full", dynamics=False)
    assert float((on.rgb - off.rgb).abs().max().detach()) > 1e-6


def test_background_only_with_empty_set():
    human, _, skel, pose, net, camera = _human_scene()
    img, _ = render_composite(human, None, skel, pose, net, camera, 0.0, "background_only", clear_color=(0.2, 0.4, 0.6))
    assert torch.allclose(img.rgb, as_tensor([0.2, 0.4, 0.6]).expand(24, 24, 3))


def test_human_only_white_uses_white_clear():
    img, _ = render_composite(*_human_scene(), 0.0, "human_only_white")
    assert torch.allclose(img.rgb[img.alpha == 0], torch.ones(1, 3, dtype=DTYPE))
    assert float(img.alpha.detach().max()) > 0
    with pytest.raises(ValueError):
        render_composite(*_human_scene(), 0.0, "depth")
