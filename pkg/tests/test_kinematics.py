import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import joint_vectors, random_q
from exosim.checks import fd_jacobian
from exosim.kinematics import (
    ACTIVE,
    BodyParams,
    JointLimits,
    JointState,
    ParameterError,
    PortId,
    build_chain,
    cuff_transform,
    damped_pinv_solve,
    forward_kinematics,
    frames,
    gh_center,
    gh_elevation,
    jacobian,
    rotation_exp,
    rotation_log,
)


# -- independent hand composition ------------------------------------------

def _rz(t):
    c, s = math.cos(t), math.sin(t)
    return np.array([[c, -s, 0, 0], [s, c, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1.0]])


def _rx(t):
    c, s = math.cos(t), math.sin(t)
    return np.array([[1, 0, 0, 0], [0, c, -s, 0], [0, s, c, 0], [0, 0, 0, 1.0]])


def _tr(x=0.0, y=0.0, z=0.0):
    T = np.eye(4)
    T[:3, 3] = (x, y, z)
    return T


def _home_handle(p1=0.30, p2=0.20, p3=0.10, p4=0.28, p5=0.25, p6=0.08):
    h = math.pi / 2
    # base: z0 along world x, x0 along world y, raised by p1
    T = _tr(z=p1) @ np.array([[0, 0, 1, 0], [1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 0, 1.0]])
    steps = [
        _rz(h) @ _rx(h),
        _tr(z=p2 + p3) @ _rx(math.pi),
        _rx(h),
        _rz(-h) @ _rx(h),
        _rz(h) @ _tr(z=p4) @ _rx(-h),
        _rz(-h) @ _tr(x=p5),
        _rx(h),
        _tr(x=p6),
    ]
    for S in steps:
        T = T @ S
    return T


def _closest_points(o1, d1, o2, d2):
    w = o1 - o2
    a, b, c = d1 @ d1, d1 @ d2, d2 @ d2
    d, e = d1 @ w, d2 @ w
    den = a * c - b * b
    s = (b * e - c * d) / den
    t = (a * e - b * d) / den
    return o1 + s * d1, o2 + t * d2


def _gh_axes_spread(chain, q):
    F = frames(chain, q)
    axes = [(F[j, :3, 3], F[j, :3, 2]) for j in (2, 3, 4)]
    pts, worst = [], 0.0
    for i in range(3):
        for k in range(i + 1, 3):
            p, r = _closest_points(*axes[i], *axes[k])
            worst = max(worst, np.linalg.norm(p - r))
            pts += [p, r]
    centre = np.mean(pts, axis=0)
    return worst, centre


# -- topology and parameters ----------------------------------------------

def test_topology(chain):
    assert [r.kind for r in chain.rows] == ["R", "P", "R", "R", "R", "R", "R", "R"]
    assert ACTIVE.sum() == 6 and not ACTIVE[6] and not ACTIVE[7]


@pytest.mark.parametrize(
    "kwargs", [dict(p1=0.0), dict(p4=-0.1), dict(p6=float("nan")), dict(beta=0.0), dict(beta=1.0), dict(side="up")]
)
def test_invalid_params(kwargs):
    with pytest.raises(ParameterError):
        BodyParams(**kwargs)


def test_invalid_limits():
    lo = np.zeros(8)
    with pytest.raises(ParameterError):
        JointLimits(lo, lo - 1)


def test_tiny_links_keep_gh_intersection():
    chain = build_chain(BodyParams(p4=0.001, p5=0.001))
    for q in random_q(np.random.default_rng(3)):
        assert _gh_axes_spread(chain, q)[0] < 1e-9


@given(joint_vectors())
def test_gh_axes_concurrent(q):
    chain = build_chain()
    spread, centre = _gh_axes_spread(chain, q)
    assert spread < 1e-9
    assert np.allclose(centre, gh_center(chain, q), atol=1e-9)


@given(joint_vectors(), joint_vectors())
def test_gh_centre_depends_only_on_girdle(q, other):
    chain = build_chain()
    mixed = np.concatenate([q[:2], other[2:]])
    assert np.allclose(gh_center(chain, q), gh_center(chain, mixed), atol=1e-12)


@given(joint_vectors())
def test_gh_centre_in_frontal_plane(q):
    chain = build_chain()
    assert abs(gh_center(chain, q)[0]) < 1e-12


# -- forward kinematics ---------------------------------------------------

def test_home_matches_hand_composition(chain):
    pose_a, pose_b, fr = forward_kinematics(chain, np.zeros(8))
    T = _home_handle()
    assert np.allclose(pose_b.translation, T[:3, 3], atol=1e-12)
    assert np.allclose(pose_b.rotation, T[:3, :3], atol=1e-12)
    # closed form: straight down from the GH centre
    assert np.allclose(pose_b.translation, [0.0, 0.30, 0.30 - 0.28 - 0.25 - 0.08], atol=1e-12)
    assert np.allclose(pose_a.translation, [0.0, 0.30, 0.30 - 0.5 * 0.28], atol=1e-12)
    assert len(fr) == 8


def test_home_scales_with_params():
    p = BodyParams(p1=0.4, p2=0.15, p3=0.12, p4=0.3, p5=0.27, p6=0.1)
    _, pose_b, _ = forward_kinematics(build_chain(p), np.zeros(8))
    assert np.allclose(pose_b.translation, _home_handle(0.4, 0.15, 0.12, 0.3, 0.27, 0.1)[:3, 3], atol=1e-12)


def test_elbow_ninety_rotates_forearm(chain):
    _, home, _ = forward_kinematics(chain, np.zeros(8))
    q = np.zeros(8)
    q[5] = math.pi / 2
    _, bent, _ = forward_kinematics(chain, q)
    elbow = np.array([0.0, 0.30, 0.30 - 0.28])
    axis = frames(chain, np.zeros(8))[5, :3, 2]
    # rotate the home forearm vector by 90 degrees about the home elbow axis (Rodrigues)
    r = home.translation - elbow
    rotated = r * 0.0 + np.cross(axis, r) + axis * (axis @ r)
    assert np.allclose(bent.translation, elbow + rotated, atol=1e-12)
    # positive flexion brings the hand forward
    assert bent.translation[0] > 0.3


@given(joint_vectors())
def test_rotations_orthonormal(q):
    chain = build_chain()
    pose_a, pose_b, fr = forward_kinematics(chain, q)
    for p in [pose_a, pose_b, *fr]:
        R = p.rotation
        assert np.abs(R.T @ R - np.eye(3)).max() < 1e-10
        assert np.linalg.det(R) > 0


def test_joint_state_input(chain):
    q = random_q(np.random.default_rng(0), 1)[0]
    a = forward_kinematics(chain, JointState(q, np.zeros(8)))[1].translation
    assert np.array_equal(a, forward_kinematics(chain, q)[1].translation)


def test_wrong_arity(chain):
    with pytest.raises(ValueError):
        forward_kinematics(chain, np.zeros(7))


# -- Jacobians ------------------------------------------------------------

def test_prismatic_column_has_no_angular_part(chain):
    J = jacobian(chain, np.zeros(8), PortId.B).J
    assert np.all(J[3:, 1] == 0.0)


@pytest.mark.parametrize("port", [PortId.A, PortId.B])
def test_jacobian_vs_finite_differences(chain, port):
    for q in random_q(np.random.default_rng(11)):
        J = jacobian(chain, q, port).J
        J_fd = fd_jacobian(chain, q, port)
        assert np.abs(J[:3] - J_fd[:3]).max() / max(1.0, np.abs(J_fd[:3]).max()) < 1e-6
        assert np.abs(J[3:] - J_fd[3:]).max() < 1e-6


@given(joint_vectors())
def test_cuff_ignores_wrist_and_elbow(q):
    chain = build_chain()
    J = jacobian(chain, q, PortId.A).J
    assert np.all(J[:, 5:] == 0.0)


# -- elevation ------------------------------------------------------------

def _arm_vector_elevation(chain, q):
    F = frames(chain, q)
    arm = F[5, :3, 3] - F[2, :3, 3]
    return math.acos(np.clip(arm @ np.array([0, 0, -1.0]) / np.linalg.norm(arm), -1, 1))


def test_elevation_home(chain):
    assert abs(gh_elevation(chain, np.zeros(8))) < 1e-12


@pytest.mark.parametrize("joint", [2, 3])
def test_elevation_horizontal(chain, joint):
    q = np.zeros(8)
    q[joint] = math.pi / 2
    assert abs(_arm_vector_elevation(chain, q) - math.pi / 2) < 1e-12
    assert abs(gh_elevation(chain, q) - math.pi / 2) < 1e-9


@given(joint_vectors())
def test_elevation_matches_arm_vector(q):
    chain = build_chain()
    assert abs(gh_elevation(chain, q) - _arm_vector_elevation(chain, q)) < 1e-7


@given(joint_vectors(), st.floats(-1.2, 1.2), st.floats(-0.6, 0.6))
def test_elevation_ignores_wrist(q, w7, w8):
    chain = build_chain()
    q2 = q.copy()
    q2[6:] = (w7, w8)
    assert gh_elevation(chain, q) == gh_elevation(chain, q2)


# -- damped least squares -------------------------------------------------

def test_dls_zero_target():
    J = np.random.default_rng(0).normal(size=(12, 8))
    assert np.all(damped_pinv_solve(J, np.zeros(12)) == 0.0)


def test_dls_square_matches_direct_solve():
    rng = np.random.default_rng(1)
    J = rng.normal(size=(6, 6)) + 3 * np.eye(6)
    v = rng.normal(size=6)
    x = damped_pinv_solve(J, v, lam=1e-9)
    x_ref = np.linalg.solve(J, v)
    assert np.abs(x - x_ref).max() / np.abs(x_ref).max() < 1e-6


@pytest.mark.parametrize("seed", range(10))
def test_dls_normal_equations(seed):
    rng = np.random.default_rng(seed)
    J = rng.normal(size=(6, 6))
    v = rng.normal(size=6)
    w = rng.uniform(0.2, 2.0, size=6)
    lam = 1e-2
    x = damped_pinv_solve(J, v, lam, w)
    W = np.diag(w)
    x_ref = np.linalg.solve(J.T @ W @ J + lam**2 * np.eye(6), J.T @ W @ v)
    assert np.abs(x - x_ref).max() / max(1.0, np.abs(x_ref).max()) < 1e-9


def test_dls_passive_columns_take_given_rates():
    rng = np.random.default_rng(4)
    J = rng.normal(size=(12, 8))
    v = rng.normal(size=12)
    qp = np.array([0.3, -0.2])
    x = damped_pinv_solve(J, v, 1e-3, passive_rates=qp)
    assert np.array_equal(x[6:], qp)
    x_ref = damped_pinv_solve(J[:, :6], v - J[:, 6:] @ qp, 1e-3)
    assert np.allclose(x[:6], x_ref, atol=1e-12)


@pytest.mark.parametrize("bad", [dict(lam=0.0), dict(weights=-np.ones(6)), dict(v_des=np.zeros(5))])
def test_dls_rejects_bad_input(bad):
    kw = dict(J_stack=np.eye(6), v_des=np.ones(6))
    kw.update(bad)
    with pytest.raises(ValueError):
        damped_pinv_solve(**kw)


# -- rotation helpers -----------------------------------------------------

@given(st.lists(st.floats(-3.0, 3.0), min_size=3, max_size=3))
def test_rotation_log_exp_roundtrip(w):
    w = np.array(w)
    R = rotation_exp(w)
    assert np.allclose(rotation_exp(rotation_log(R)), R, atol=1e-9)


def test_rotation_log_near_pi():
    w = np.array([0.0, 0.0, math.pi - 1e-9])
    assert np.allclose(np.abs(rotation_log(rotation_exp(w))), np.abs(w), atol=1e-6)


def test_cuff_between_gh_and_elbow(chain):
    q = random_q(np.random.default_rng(5), 1)[0]
    F = frames(chain, q)
    cuff = cuff_transform(chain, q, F)[:3, 3]
    assert np.allclose(cuff, 0.5 * (F[2, :3, 3] + F[5, :3, 3]), atol=1e-12)
