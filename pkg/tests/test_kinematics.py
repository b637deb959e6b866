import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import chain2, front_camera, mixed_skeleton, random_rotation
from phystrack import rotations as rot
from phystrack.errors import DegenerateProjectionError, InvalidInputError, ParseError, UnsupportedVersionError
from phystrack.kinematics import (Camera, Keypoints2D, Pose, Skeleton, finite_difference_velocities, fk_batch,
                                  fk_vjp, forward_kinematics, project, reprojection_gradient, reprojection_loss,
                                  reprojection_terms_batch, rotation_geodesic_angle, to_root_frame)

ID = np.array([1.0, 0.0, 0.0, 0.0])


# -- rotations -----------------------------------------------------------------


def test_exp_log_roundtrip(rng):
    r = rng.standard_normal((200, 3))
    r *= (rng.uniform(0, 3.0, 200) / np.linalg.norm(r, axis=1))[:, None]
    assert np.allclose(rot.so3_log(rot.so3_exp(r)), r, atol=1e-9)
    assert np.allclose(rot.so3_exp(np.zeros(3)), np.eye(3))


def test_left_jacobian_first_order(rng):
    for _ in range(20):
        r = rng.standard_normal(3)
        d = rng.standard_normal(3) * 1e-6
        lhs = rot.so3_exp(r + d)
        rhs = rot.so3_exp(rot.left_jacobian(r) @ d) @ rot.so3_exp(r)
        assert np.abs(lhs - rhs).max() < 1e-10
        assert np.allclose(rot.left_jacobian_inv(r) @ rot.left_jacobian(r), np.eye(3), atol=1e-10)


def test_quaternion_matrix_consistency(rng):
    q = rot.quat_normalize(rng.standard_normal((50, 4)))
    R = rot.quat_to_mat(q)
    q2 = rot.mat_to_quat(R)
    assert np.allclose(np.abs(np.sum(q * q2, -1)), 1.0)
    a, b = q[:25], q[25:]
    assert np.allclose(rot.quat_to_mat(rot.quat_mul(a, b)), rot.quat_to_mat(a) @ rot.quat_to_mat(b))


def test_heading_grad_matches_fd(rng):
    for _ in range(20):
        R = random_rotation(rng)
        g = rot.heading_grad(R)
        fd = np.zeros(3)
        for i in range(3):
            e = np.zeros(3)
            e[i] = 1e-6
            fd[i] = (rot.heading_angle(rot.so3_exp(e) @ R) - rot.heading_angle(rot.so3_exp(-e) @ R)) / 2e-6
        assert np.allclose(g, fd, atol=1e-6)


# -- skeleton / FK -------------------------------------------------------------


def test_skeleton_validation():
    from phystrack.kinematics import Joint
    with pytest.raises(InvalidInputError):
        Skeleton([])
    with pytest.raises(InvalidInputError):
        Skeleton([Joint("r", None, "free"), Joint("a", 0, "hinge", (1, 0, 0), (0, 0, 2.0))])
    with pytest.raises(InvalidInputError):
        Skeleton([Joint("r", None, "free"), Joint("a", 2, "ball")])


def test_skeleton_dict_roundtrip():
    sk = mixed_skeleton()
    assert Skeleton.from_dict(sk.to_dict()) == sk
    d = sk.to_dict()
    d["version"] = 99
    with pytest.raises(UnsupportedVersionError):
        Skeleton.from_dict(d)
    d = sk.to_dict()
    del d["joints"][1]["kind"]
    with pytest.raises(ParseError, match="joints\\[1\\]"):
        Skeleton.from_dict(d)


def test_fk_identity_chain():
    X, o = forward_kinematics(chain2(), Pose(np.zeros(3), ID, np.zeros(2)))
    assert np.allclose(X, [[0, 0, 0], [1, 0, 0], [2, 0, 0]])
    assert np.allclose(np.abs(o[:, 0]), 1.0)


def test_fk_hinge_quarter_turn():
    X, _ = forward_kinematics(chain2(), Pose(np.zeros(3), ID, [np.pi / 2, 0.0]))
    assert np.allclose(X[2], [1.0, 1.0, 0.0])


def test_fk_translation_equivariance(rng):
    sk = mixed_skeleton()
    a = rng.standard_normal(sk.num_nonroot_dof) * 0.5
    q = rot.mat_to_quat(random_rotation(rng))
    X0, o0 = forward_kinematics(sk, Pose(np.zeros(3), q, a))
    X1, o1 = forward_kinematics(sk, Pose([0, 0, 1.0], q, a))
    assert np.allclose(X1 - X0, [0, 0, 1.0])
    assert np.allclose(o0, o1)


def test_fk_rotation_equivariance(rng):
    sk = mixed_skeleton()
    for _ in range(10):
        a = rng.standard_normal(sk.num_nonroot_dof) * 0.5
        t = rng.standard_normal(3)
        R0 = random_rotation(rng)
        Q = random_rotation(rng)
        X0, _ = fk_batch(sk, t[None], R0[None], a[None])
        X1, _ = fk_batch(sk, t[None], (Q @ R0)[None], a[None])
        assert np.allclose(X1[0] - t, (X0[0] - t) @ Q.T)


def test_fk_vjp_matches_fd(rng):
    sk = mixed_skeleton()
    B = 3
    t = rng.standard_normal((B, 3))
    R = np.stack([random_rotation(rng) for _ in range(B)])
    a = rng.standard_normal((B, sk.num_nonroot_dof)) * 0.7
    W = rng.standard_normal((B, sk.num_joints, 3))
    f = lambda t, R, a: np.sum(fk_batch(sk, t, R, a)[0] * W, axis=(1, 2))
    X, Rw = fk_batch(sk, t, R, a)
    gt, gw, ga = fk_vjp(sk, X, Rw, a, W)
    h = 1e-6
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        assert np.allclose((f(t + e, R, a) - f(t - e, R, a)) / (2 * h), gt[:, i], atol=1e-6)
        Rp, Rm = rot.so3_exp(e) @ R, rot.so3_exp(-e) @ R
        assert np.allclose((f(t, Rp, a) - f(t, Rm, a)) / (2 * h), gw[:, i], atol=1e-6)
    for d in range(sk.num_nonroot_dof):
        e = np.zeros(sk.num_nonroot_dof)
        e[d] = h
        assert np.allclose((f(t, R, a + e) - f(t, R, a - e)) / (2 * h), ga[:, d], atol=1e-6)


# -- finite-difference velocities ------------------------------------------------


def test_fd_velocities_examples():
    sk = chain2()
    p = Pose(np.zeros(3), ID, np.zeros(2))
    v = finite_difference_velocities(sk, p, p, 1 / 30)
    assert np.all(v.vector() == 0)
    v = finite_difference_velocities(sk, p, Pose(np.zeros(3), ID, [0.3, 0.0]), 0.1)
    assert v.joint_rates[0] == pytest.approx(3.0)
    v = finite_difference_velocities(sk, p, Pose([0.1, 0, 0], ID, np.zeros(2)), 0.1)
    assert np.allclose(v.root_linear, [1.0, 0.0, 0.0])
    with pytest.raises(InvalidInputError):
        finite_difference_velocities(sk, p, p, 0.0)


# -- camera ------------------------------------------------------------------------


CAM = Camera(500.0, 500.0, 320.0, 240.0)


def test_project_examples():
    assert np.allclose(project(CAM, np.array([[0, 0, 3.0], [0, 0, 17.0]])), [[320, 240], [320, 240]])
    assert np.allclose(project(CAM, np.array([[1.0, 0, 5.0]])), [[420, 240]])
    near = project(CAM, np.array([[0.3, -0.2, 2.0]]))[0] - [320, 240]
    far = project(CAM, np.array([[0.3, -0.2, 4.0]]))[0] - [320, 240]
    assert np.allclose(far, near / 2)


def test_project_behind_camera():
    with pytest.raises(DegenerateProjectionError) as ei:
        project(CAM, np.array([[0, 0, 1.0], [0, 0, -1.0]]))
    assert ei.value.joint == 1


def test_reprojection_loss_examples():
    X = np.array([[0.2, 0.1, 3.0], [-0.4, 0.3, 4.0]])
    kp = project(CAM, X)
    assert reprojection_loss(CAM, X, Keypoints2D(kp, np.ones(2))) == 0.0
    assert reprojection_loss(CAM, X, Keypoints2D(kp + 50.0, np.zeros(2))) == 0.0
    X1 = X[:1]
    kp1 = project(CAM, X1) + [3.0, 4.0]
    assert reprojection_loss(CAM, X1, Keypoints2D(kp1, np.array([0.5]))) == pytest.approx(12.5)


def _random_config(rng, J=5):
    cam = Camera.look_at(rng.uniform(-1, 1, 3) + [0, -4, 1], rng.uniform(-0.3, 0.3, 3), fx=rng.uniform(300, 900),
                         fy=rng.uniform(300, 900))
    X = rng.uniform(-0.8, 0.8, (J, 3))
    kp = project(cam, X) + rng.normal(0, 15, (J, 2))
    return cam, X, Keypoints2D(kp, rng.uniform(0, 1, J))


def reprojection_fd_worst(rng, trials=100):
    """Worst relative error of the analytic gradient against central differences
    (step 1e-5) over random configurations."""
    worst = 0.0
    for _ in range(trials):
        cam, X, kp = _random_config(rng)
        g = reprojection_gradient(cam, X, kp)
        fd = np.zeros_like(X)
        for j in range(X.shape[0]):
            for i in range(3):
                Xp, Xm = X.copy(), X.copy()
                Xp[j, i] += 1e-5
                Xm[j, i] -= 1e-5
                fd[j, i] = (reprojection_loss(cam, Xp, kp) - reprojection_loss(cam, Xm, kp)) / 2e-5
        worst = max(worst, np.linalg.norm(g - fd) / np.linalg.norm(fd))
    return worst


def test_reprojection_gradient_fd(rng):
    assert reprojection_fd_worst(rng, 100) < 1e-4


def test_reprojection_hessian_fd(rng):
    for _ in range(20):
        cam, X, kp = _random_config(rng)
        _, g, H = reprojection_terms_batch(cam, X[None], kp.positions[None], kp.confidences[None], hessian=True)
        for i in range(3):
            Xp, Xm = X.copy(), X.copy()
            Xp[:, i] += 1e-6
            Xm[:, i] -= 1e-6
            gp = reprojection_terms_batch(cam, Xp[None], kp.positions[None], kp.confidences[None])[1]
            gm = reprojection_terms_batch(cam, Xm[None], kp.positions[None], kp.confidences[None])[1]
            fd = (gp - gm)[0] / 2e-6
            assert np.allclose(H[0, :, :, i], fd, rtol=1e-5, atol=1e-4 * np.abs(fd).max())


def test_reprojection_gradient_properties(rng):
    cam, X, kp = _random_config(rng)
    exact = Keypoints2D(project(cam, X), kp.confidences)
    assert np.allclose(reprojection_gradient(cam, X, exact), 0.0)
    g = reprojection_gradient(cam, X, kp)
    c2 = kp.confidences.copy()
    c2[2] = min(1.0, 2 * c2[2]) if c2[2] <= 0.5 else c2[2] / 2
    ratio = c2[2] / kp.confidences[2]
    g2 = reprojection_gradient(cam, X, Keypoints2D(kp.positions, c2))
    assert np.allclose(g2[2], ratio * g[2])
    assert np.allclose(np.delete(g2, 2, 0), np.delete(g, 2, 0))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_reprojection_loss_nonnegative_zero_iff_match(seed):
    rng = np.random.default_rng(seed)
    cam, X, kp = _random_config(rng)
    assert reprojection_loss(cam, X, kp) >= 0.0
    conf = kp.confidences.copy()
    conf[0] = 0.0
    pos = project(cam, X)
    pos[0] += 100.0  # unconfident joint may be anywhere
    assert reprojection_loss(cam, X, Keypoints2D(pos, conf)) == pytest.approx(0.0, abs=1e-9)
    pos[1] += 0.5
    conf[1] = 0.3
    assert reprojection_loss(cam, X, Keypoints2D(pos, conf)) > 0.0


# -- root frame / geodesic -------------------------------------------------------


def test_to_root_frame_examples(rng):
    v = rng.standard_normal((4, 3))
    assert np.allclose(to_root_frame(Pose(np.zeros(3), ID, []), v), v)
    q = rot.quat_from_rotvec(np.array([0, 0, np.pi / 2]))
    assert np.allclose(to_root_frame(Pose(np.zeros(3), q, []), np.array([[1.0, 0, 0]])), [[0, -1, 0]])
    # twice = inverse of twice the yaw
    q = rot.quat_from_rotvec(np.array([0, 0, 0.7]))
    p = Pose(np.zeros(3), q, [])
    twice = to_root_frame(p, to_root_frame(p, v))
    assert np.allclose(twice, v @ rot.yaw_matrix(1.4))


def test_to_root_frame_invariance(rng):
    for _ in range(10):
        q = rot.mat_to_quat(random_rotation(rng))
        pose = Pose(rng.standard_normal(3), q, [])
        pts = rng.standard_normal((5, 3))
        local = to_root_frame(pose, pts - pose.root_translation)
        Y = rot.yaw_matrix(rng.uniform(-np.pi, np.pi))
        shift = rng.standard_normal(3)
        q2 = rot.mat_to_quat(Y @ rot.quat_to_mat(q))
        pose2 = Pose(Y @ pose.root_translation + shift, q2, [])
        pts2 = pts @ Y.T + shift
        assert np.allclose(to_root_frame(pose2, pts2 - pose2.root_translation), local)


def test_geodesic_examples(rng):
    q = rot.mat_to_quat(random_rotation(rng))
    assert rotation_geodesic_angle(q, q) == pytest.approx(0.0, abs=1e-7)
    assert rotation_geodesic_angle(q, -q) == pytest.approx(0.0, abs=1e-7)
    for _ in range(10):
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        assert rotation_geodesic_angle(ID, rot.quat_from_rotvec(0.4 * axis)) == pytest.approx(0.4)
    with pytest.raises(InvalidInputError):
        rotation_geodesic_angle(ID, np.array([2.0, 0, 0, 0]))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_geodesic_metric_axioms(seed):
    rng = np.random.default_rng(seed)
    a, b, c = rot.quat_normalize(rng.standard_normal((3, 4)))
    ab, ba = rotation_geodesic_angle(a, b), rotation_geodesic_angle(b, a)
    assert abs(ab - ba) < 1e-9
    assert rotation_geodesic_angle(a, c) <= ab + rotation_geodesic_angle(b, c) + 1e-9
