import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from jointsplat.geometry import (BehindCamera, CameraIntrinsics, CameraState, RigidTransform, Rotation, as_tensor,
                                 camera_pose_t, look_at, project_point, projection_jacobian, se3_compose, so3_exp,
                                 so3_exp_t)

vec3 = st.lists(st.floats(-3, 3), min_size=3, max_size=3).map(np.array)
quat = st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 0.1).map(np.array)


def rigid(q, t):
    return RigidTransform(Rotation(q), t)


def cam100():
    return CameraState(CameraIntrinsics(100, 100, 50, 50, 100, 100))


def test_so3_exp_zero_is_identity():
    assert np.array_equal(so3_exp([0, 0, 0]).q, [1, 0, 0, 0])


def test_so3_exp_quarter_turn_about_z():
    r = so3_exp([0, 0, np.pi / 2])
    assert np.allclose(r.apply([1, 0, 0]), [0, 1, 0], atol=1e-12)


def test_so3_exp_small_angle_branches_agree():
    v = np.array([1e-9, 0, 0])
    th = np.linalg.norm(v)
    general = np.r_[np.cos(th / 2), np.sin(th / 2) / th * v]
    assert np.allclose(so3_exp(v).q, general, atol=1e-12)


def test_so3_exp_rejects_nonfinite():
    with pytest.raises(ValueError):
        so3_exp([np.nan, 0, 0])


@given(vec3)
def test_so3_exp_fixes_its_axis(v):
    assert np.allclose(so3_exp(v).apply(v), v, atol=1e-9)


@given(quat, quat)
def test_quaternion_norm_after_composition(a, b):
    r = Rotation(a) * Rotation(b)
    assert abs(np.linalg.norm(r.q) - 1) < 1e-9


@given(quat)
def test_matrix_round_trip(q):
    r = Rotation(q)
    back = Rotation.from_matrix(r.matrix()).q
    assert min(np.abs(back - r.q).max(), np.abs(back + r.q).max()) < 1e-9


@given(quat, vec3)
def test_compose_with_inverse_is_identity(q, t):
    a = rigid(q, t)
    ident = se3_compose(a, a.inverse())
    assert np.allclose(ident.matrix(), np.eye(4), atol=1e-9)


def test_compose_identity_left():
    t = rigid([0.3, 0.1, -0.5, 0.8], [1, 2, 3])
    assert np.allclose(se3_compose(RigidTransform.identity(), t).matrix(), t.matrix(), atol=1e-15)


@given(quat, vec3, quat, vec3, vec3)
def test_compose_matches_sequential_application(q1, t1, q2, t2, p):
    d, b = rigid(q1, t1), rigid(q2, t2)
    assert np.allclose(se3_compose(d, b).apply(p), d.apply(b.apply(p)), atol=1e-12 * (1 + np.abs(p).max() + 6))


@given(quat, vec3, quat, vec3, quat, vec3)
def test_compose_associative(q1, t1, q2, t2, q3, t3):
    a, b, c = rigid(q1, t1), rigid(q2, t2), rigid(q3, t3)
    lhs = se3_compose(se3_compose(a, b), c).matrix()
    rhs = se3_compose(a, se3_compose(b, c)).matrix()
    assert np.allclose(lhs, rhs, atol=1e-9)


def test_camera_pose_is_correction_after_base():
    base = rigid([0.9, 0.1, 0.2, -0.1], [0.1, -0.2, 3.0])
    corr = np.array([0.01, -0.02, 0.03, 0.1, 0.0, -0.05])
    cam = CameraState(CameraIntrinsics(10, 10, 5, 5, 10, 10), base, corr)
    expect = se3_compose(RigidTransform.from_tangent(corr), base)
    assert np.allclose(cam.pose().matrix(), expect.matrix(), atol=1e-15)
    r, t = camera_pose_t(cam)
    assert np.allclose(r.numpy(), expect.rotation.matrix(), atol=1e-14)
    assert np.allclose(t.numpy(), expect.translation, atol=1e-14)


def test_project_on_axis_and_offset():
    px, depth = project_point(cam100(), [0, 0, 2])
    assert np.allclose(px, [50, 50]) and depth == 2
    px, _ = project_point(cam100(), [1, 0, 2])
    assert np.allclose(px, [100, 50])


def test_project_behind_camera():
    with pytest.raises(BehindCamera):
        project_point(cam100(), [0, 0, -1])


def test_projection_jacobian_examples():
    assert np.allclose(projection_jacobian(cam100(), [0, 0, 2]), [[50, 0, 0], [0, 50, 0]])
    assert np.allclose(projection_jacobian(cam100(), [1, 0, 2])[0], [50, 0, -25])
    with pytest.raises(BehindCamera):
        projection_jacobian(cam100(), [0, 0, 0])


def test_projection_jacobian_matches_finite_differences():
    rng = np.random.default_rng(0)
    cam = cam100()
    h = 1e-5
    worst = 0.0
    for _ in range(1000):
        p = np.r_[rng.uniform(-1, 1, 2), rng.uniform(1, 5)]
        jac = projection_jacobian(cam, p)
        fd = np.empty((2, 3))
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            fd[:, k] = (project_point(cam, p + e)[0] - project_point(cam, p - e)[0]) / (2 * h)
        worst = max(worst, np.abs(fd - jac).max() / np.abs(jac).max())
    assert worst < 1e-5


def test_look_at_puts_target_on_axis():
    pose = look_at([1.0, 2.0, 3.0], [0.0, 0.5, 0.0])
    p = pose.apply([0.0, 0.5, 0.0])
    assert np.allclose(p[:2], 0, atol=1e-12) and p[2] > 0
    # world up maps to image up (negative y)
    assert pose.rotation.apply([0, 1, 0])[1] < 0


@given(vec3)
def test_torch_exp_matches_numpy(v):
    assert np.allclose(so3_exp_t(as_tensor(v)).numpy(), so3_exp(v).matrix(), atol=1e-12)


def test_torch_exp_gradient_at_zero_is_finite():
    v = torch.zeros(3, dtype=torch.float64, requires_grad=True)
    so3_exp_t(v).sum().backward()
    assert torch.all(torch.isfinite(v.grad))


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(0, 1, 0, 0, 1, 1)
    with pytest.raises(ValueError):
        CameraIntrinsics(1, 1, 0, 0, 0, 1)
