import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from jointsplat.body import Skeleton
from jointsplat.gaussians import (SH_C0, SH_C1, GaussianSet, build_covariance, eval_sh, init_background_gaussians,
                                  init_human_gaussians)
from jointsplat.geometry import as_tensor, so3_exp


def test_covariance_diagonal_case():
    cov = build_covariance(torch.eye(3, dtype=torch.float64), as_tensor([1, 2, 3]))
    assert torch.allclose(cov, torch.diag(as_tensor([1, 4, 9])))


def test_covariance_axis_swap():
    r = as_tensor(so3_exp([0, 0, np.pi / 2]).matrix())
    cov = build_covariance(r, as_tensor([1, 2, 1]))
    assert torch.allclose(cov, torch.diag(as_tensor([4, 1, 1])), atol=1e-12)


@given(st.integers(0, 10_000))
def test_covariance_symmetric_psd_for_blended_rotations(seed):
    rng = np.random.default_rng(seed)
    # a convex blend of rotations is generally not orthonormal
    rots = [so3_exp(rng.normal(size=3)).matrix() for _ in range(3)]
    w = rng.dirichlet(np.ones(3))
    r = as_tensor(sum(wi * ri for wi, ri in zip(w, rots)))
    cov = build_covariance(r, as_tensor(np.exp(rng.normal(size=3))))
    assert float((cov - cov.T).abs().max()) < 1e-12
    assert float(torch.linalg.eigvalsh(cov).min()) >= -1e-12


def test_sh_offset_convention():
    out = eval_sh(torch.zeros(1, 1, 3, dtype=torch.float64), as_tensor([[0, 0, 1]]), 0)
    assert torch.allclose(out, torch.full((1, 3), 0.5, dtype=torch.float64))
    out = eval_sh(torch.ones(1, 1, 3, dtype=torch.float64), as_tensor([[0, 0, 1]]), 0)
    assert torch.allclose(out, torch.full((1, 3), 0.78209, dtype=torch.float64), atol=1e-5)


def test_sh_degree_one_matches_basis_polynomials():
    rng = np.random.default_rng(1)
    sh = rng.normal(size=(4, 3))
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    x, y, z = d
    basis = np.array([SH_C0, -SH_C1 * y, SH_C1 * z, -SH_C1 * x])
    expect = basis @ sh + 0.5
    got = eval_sh(as_tensor(sh)[None], as_tensor(d)[None], 1)[0]
    assert np.allclose(got.numpy(), expect, atol=1e-9)


def test_sh_degree_zero_is_view_independent():
    rng = np.random.default_rng(2)
    sh = as_tensor(rng.normal(size=(1, 4, 3))).expand(100, 4, 3)
    d = rng.normal(size=(100, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    out = eval_sh(sh, as_tensor(d), 0)
    assert torch.equal(out, out[:1].expand(100, 3))


def test_sh_rejects_degree_four():
    with pytest.raises(ValueError):
        eval_sh(torch.zeros(1, 25, 3), torch.zeros(1, 3), 4)


def test_single_capsule_single_gaussian():
    skel = Skeleton.chain(1, bone_length=0.5, radius=0.1, blend=0.0)
    g = init_human_gaussians(skel, 1, seed=0)
    assert g.count == 1
    w = g.lbs_weights()
    assert torch.allclose(w, torch.ones(1, 1, dtype=torch.float64))
    # on the capsule surface: distance to the bone axis (a y-segment from 0 to 0.5) equals the radius
    p = g.means[0].numpy()
    seg_y = np.clip(p[1], 0.0, 0.5)
    assert abs(np.linalg.norm(p - np.array([0.0, seg_y, 0.0])) - 0.1) < 1e-9


def test_human_init_deterministic():
    skel = Skeleton.humanoid()
    a = init_human_gaussians(skel, 1000, seed=5)
    b = init_human_gaussians(skel, 1000, seed=5)
    for k in GaussianSet.PARAMS:
        assert torch.equal(getattr(a, k), getattr(b, k))


def test_human_weights_follow_nearest_vertex():
    skel = Skeleton.chain(4, bone_length=0.3, radius=0.05, blend=0.0)
    g = init_human_gaussians(skel, 200, seed=1)
    w = g.lbs_weights().numpy()
    assert np.allclose(w.sum(1), 1, atol=1e-6)
    d = np.linalg.norm(g.means.numpy()[:, None] - skel.vertices[None], axis=2)
    expect = skel.vertex_weights[d.argmin(1)]
    assert np.allclose(w, expect, atol=1e-12)
    assert np.all(np.isclose(w.max(1), 1.0))


def test_human_init_defaults():
    g = init_human_gaussians(Skeleton.chain(2), 10, seed=0)
    assert torch.allclose(g.opacities(), torch.full((10,), 0.5, dtype=torch.float64))
    assert torch.allclose(g.lbs_init, g.lbs_weights())
    with pytest.raises(ValueError):
        init_human_gaussians(Skeleton.chain(2), 0, seed=0)


def test_lbs_softmax_sum_has_zero_gradient():
    g = init_human_gaussians(Skeleton.chain(3), 20, seed=0)
    logits = g.lbs_logits.clone().requires_grad_(True)
    torch.softmax(logits, -1).sum().backward()
    assert float(logits.grad.abs().max()) < 1e-10


def test_background_single_point_default_scale():
    g = init_background_gaussians([[0, 0, 0]], [[0.2, 0.4, 0.6]])
    assert np.allclose(g.scales().numpy(), 0.1)
    assert np.allclose(g.opacities().numpy(), 0.5)


def test_background_pair_scale_is_distance():
    g = init_background_gaussians([[0, 0, 0], [0.7, 0, 0]], [[0.5] * 3] * 2)
    assert np.allclose(g.scales().numpy(), 0.7)


def test_background_scales_match_brute_force_knn():
    rng = np.random.default_rng(0)
    pts = rng.uniform(-1, 1, (100, 3))
    g = init_background_gaussians(pts, rng.uniform(0, 1, (100, 3)))
    d = np.linalg.norm(pts[:, None] - pts[None], axis=2)
    np.fill_diagonal(d, np.inf)
    expect = np.sort(d, axis=1)[:, :3].mean(1)
    assert np.allclose(g.scales().numpy()[:, 0], expect, atol=1e-9)


def test_background_colour_round_trip():
    rgb = np.array([[0.1, 0.5, 0.9]])
    g = init_background_gaussians([[0, 0, 0]], rgb)
    out = eval_sh(g.sh, as_tensor([[0, 0, 1]]), 1)
    assert np.allclose(out.numpy(), rgb, atol=1e-12)


def test_background_empty_rejected():
    with pytest.raises(ValueError):
        init_background_gaussians(np.zeros((0, 3)), np.zeros((0, 3)))


def test_set_invariants():
    g = init_background_gaussians(np.eye(3), np.ones((3, 3)) * 0.5)
    with pytest.raises(ValueError):
        GaussianSet("background", g.means, g.quats[:2], g.log_scales, g.opacity_logits, g.sh)
    with pytest.raises(ValueError):
        GaussianSet("background", g.means, g.quats, g.log_scales, g.opacity_logits, g.sh,
                    lbs_logits=torch.zeros(3, 2))
    assert GaussianSet.concat(g, g).count == 6
    assert g.select([0, 2]).count == 2
