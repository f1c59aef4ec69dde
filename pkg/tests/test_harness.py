import math

import numpy as np
import pytest
import torch

from jointsplat import harness
from jointsplat.geometry import DTYPE, as_tensor
from jointsplat.harness import (NoiseSpec, format_sweep, generate_scene, mean_by, parse_sweep, perturb_init, psnr,
                                render_gt_frame, ssim_metric)
from jointsplat.scene import SceneConfig, frame_time, split_frames
from oracles import loop_psnr, loop_ssim


def test_metrics_match_scalar_loops():
    rng = np.random.default_rng(0)
    a, b = rng.uniform(0, 1, (8, 8, 3)), rng.uniform(0, 1, (8, 8, 3))
    assert abs(psnr(as_tensor(a), as_tensor(b)) - loop_psnr(a, b)) < 1e-9
    assert abs(ssim_metric(as_tensor(a), as_tensor(b)) - loop_ssim(a, b)) < 1e-9


def test_psnr_examples():
    a = torch.zeros(4, 4, 3, dtype=DTYPE)
    assert psnr(a, a) == math.inf
    assert abs(psnr(a, a + 0.1) - 20.0) < 1e-9
    assert abs(psnr(a, a + 1.0)) < 1e-12
    with pytest.raises(ValueError):
        psnr(a, torch.zeros(2, 2, 3))


def test_ssim_metric_examples():
    a = torch.rand(12, 12, 3, dtype=DTYPE)
    assert abs(ssim_metric(a, a) - 1.0) < 1e-12
    z, o = torch.zeros(12, 12, 3, dtype=DTYPE), torch.ones(12, 12, 3, dtype=DTYPE)
    assert abs(ssim_metric(z, o) - 9.999e-5) < 1e-8


def test_split_and_time():
    train, val, test = split_frames(20)
    assert list(test) == [5, 15] and list(val) == [8, 18] and len(train) == 16
    assert frame_time(0, 5) == 0.0 and frame_time(4, 5) == 1.0 and frame_time(0, 1) == 0.0


def test_scene_is_deterministic_and_self_consistent(tiny_scene):
    again = generate_scene(tiny_scene.config)
    assert torch.equal(again.images, tiny_scene.images)
    assert torch.equal(again.masks, tiny_scene.masks)
    for f in range(tiny_scene.frames):
        assert torch.equal(render_gt_frame(tiny_scene, f).rgb, tiny_scene.images[f])
    assert float(tiny_scene.masks.sum()) > 0
    assert set(torch.unique(tiny_scene.masks).tolist()) <= {0.0, 1.0}


def test_static_body_with_moving_camera():
    scene = generate_scene(SceneConfig(width=16, height=16, focal=22.0, frames=5, human_count=30,
                                       background_count=40, motion_amplitude=0.0, seed=1))
    th = scene.gt_body.theta
    assert torch.equal(th, th[:1].expand_as(th))
    poses = [c.inverse().translation for c in scene.gt_cameras]
    assert not np.allclose(poses[0], poses[-1])


def test_invalid_scene_config():
    with pytest.raises(ValueError):
        SceneConfig(frames=0)


def test_perturb_zero_sigma_is_exact(tiny_scene):
    cams, body = perturb_init(tiny_scene, NoiseSpec(0.0), seed=3)
    assert all(np.array_equal(a.matrix(), b.matrix()) for a, b in zip(cams, tiny_scene.gt_cameras))
    assert torch.equal(body.theta, tiny_scene.gt_body.theta)


def test_perturb_seeds_differ(tiny_scene):
    a = perturb_init(tiny_scene, NoiseSpec(0.01), seed=0)[1].theta
    b = perturb_init(tiny_scene, NoiseSpec(0.01), seed=1)[1].theta
    assert not torch.equal(a, b)
    assert torch.equal(perturb_init(tiny_scene, NoiseSpec(0.01), seed=0)[1].beta, tiny_scene.gt_body.beta)


def test_rotation_noise_statistics():
    rng = np.random.default_rng(0)
    draws = np.stack([harness.camera_noise(0.01, 3.0, rng)[:3] for _ in range(10_000)])
    assert abs(draws.std() - 0.01) <= 0.05 * 0.01


def test_injected_camera_rotation_matches_sigma():
    scene = generate_scene(SceneConfig(width=8, height=8, focal=11.0, frames=400, human_count=10,
                                       background_count=10, seed=0))
    cams, _ = perturb_init(scene, NoiseSpec(0.01), seed=0)
    rel = np.stack([(c.rotation * g.rotation.inverse()).log() for c, g in zip(cams, scene.gt_cameras)])
    # 1200 axis-angle components
    assert abs(rel.std() - 0.01) <= 0.05 * 0.01


def test_sweep_table_round_trip():
    rows = [{"sigma": s, "mode": m, "seed": k, "psnr": 20 + s + k, "ssim": 0.9}
            for s in (0.0, 0.01) for m in ("frozen", "joint") for k in (0, 1)]
    text = format_sweep(rows)
    assert text.splitlines()[0] == "sigma\tmode\tseed\tpsnr\tssim"
    assert parse_sweep(text) == rows
    assert mean_by(rows, "sigma", "mode")[(0.01, "joint")] == pytest.approx(20.51)
    with pytest.raises(ValueError):
        parse_sweep("bad header\n")


def test_evaluation_at_gt_is_exact(tiny_scene):
    from jointsplat.train import TrainConfig, init_state

    state = init_state(tiny_scene.with_init(), TrainConfig())
    state.human = tiny_scene.gt_human.clone()
    res = harness.evaluate(tiny_scene, state, [0, 1])
    assert res["psnr"] == math.inf and abs(res["ssim"] - 1.0) < 1e-12
