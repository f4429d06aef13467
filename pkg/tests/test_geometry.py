import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from a2visr.geometry import (FrameError, FrameId, PoseTransform, UnitQuaternion, check_rotation, compose, exp_so3,
                             inverse, quat_multiply, quat_to_rotation, rot_x, rot_z, rotation_to_quat,
                             to_reference_frame)

F = FrameId
finite = st.floats(-10, 10, allow_nan=False)
vec3 = st.tuples(finite, finite, finite)
quat = st.tuples(finite, finite, finite, finite).filter(lambda q: np.linalg.norm(q) > 1e-3)


def random_pose(rng, source, target):
    return PoseTransform(exp_so3(rng.normal(size=3)), rng.normal(size=3), source, target)


def test_identity_quaternion():
    assert np.array_equal(quat_to_rotation(UnitQuaternion.identity()), np.eye(3))


def test_quarter_turn_about_z():
    q = UnitQuaternion(np.cos(np.pi / 4), 0.0, 0.0, np.sin(np.pi / 4))
    assert np.allclose(quat_to_rotation(q) @ [1, 0, 0], [0, 1, 0], atol=1e-15)


def test_non_unit_quaternion_flagged():
    q = UnitQuaternion(2.0, 0.0, 0.0, 0.0)
    assert q.renormalized and q.w == 1.0
    assert not UnitQuaternion.identity().renormalized
    with pytest.raises(ValueError):
        UnitQuaternion(0.0, 0.0, 0.0, 0.0)


@given(quat)
def test_rotation_matches_quaternion_sandwich(qc):
    # oracle: rotate v as q v q* using the Hamilton product
    q = UnitQuaternion(*qc)
    R = quat_to_rotation(q)
    v = np.array([0.3, -1.2, 2.0])
    qa = q.as_array()
    conj = qa * [1, -1, -1, -1]
    rotated = quat_multiply(quat_multiply(qa, np.concatenate([[0.0], v])), conj)[1:]
    assert np.allclose(R @ v, rotated, atol=1e-12)
    assert np.allclose(R.T @ R, np.eye(3), atol=1e-12)
    assert abs(np.linalg.det(R) - 1) < 1e-12
    assert abs(np.linalg.norm(R @ v) - np.linalg.norm(v)) < 1e-9


@given(quat)
def test_rotation_to_quat_round_trip(qc):
    q = UnitQuaternion(*qc)
    back = rotation_to_quat(quat_to_rotation(q))
    assert np.allclose(back.as_array(), q.canonical().as_array(), atol=1e-9) or \
        np.allclose(back.as_array(), -q.canonical().as_array(), atol=1e-9)


def test_check_rotation_repairs_small_drift_and_rejects_large():
    R = rot_z(0.3)
    drift = R + 1e-8
    fixed = check_rotation(drift)
    assert np.allclose(fixed.T @ fixed, np.eye(3), atol=1e-12)
    with pytest.raises(ValueError):
        check_rotation(R + 1e-3)
    with pytest.raises(ValueError):
        check_rotation(np.diag([1.0, 1.0, -1.0]))


def test_compose_identity_and_inverse(rng):
    T = random_pose(rng, F.BODY, F.CAMERA)
    assert compose(T, PoseTransform.identity(F.BODY, F.BODY)).allclose(T)
    assert compose(T, inverse(T)).allclose(PoseTransform.identity(F.CAMERA, F.CAMERA), atol=1e-12)
    assert inverse(inverse(T)).allclose(T, atol=1e-12)


def test_compose_rejects_mismatched_frames(rng):
    a = random_pose(rng, F.BODY, F.CAMERA)
    b = random_pose(rng, F.BODY, F.GROUND)
    with pytest.raises(FrameError, match="inner frames differ"):
        compose(a, b)


def test_chain_matches_pointwise_oracle(rng):
    T_GpG = random_pose(rng, F.GROUND, F.GROUND_REFERENCE)
    T_GM = random_pose(rng, F.MECHANISM_BASE, F.GROUND)
    T_MC = random_pose(rng, F.CAMERA, F.MECHANISM_BASE)
    T_CB = random_pose(rng, F.BODY, F.CAMERA)
    chain = T_GpG @ T_GM @ T_MC @ T_CB
    p = np.array([0.1, -0.4, 0.25])
    step = T_GpG.apply(T_GM.apply(T_MC.apply(T_CB.apply(p))))
    assert np.allclose(chain.apply(p), step, atol=1e-12)
    assert chain.source == F.BODY and chain.target == F.GROUND_REFERENCE


def test_composition_associative(rng):
    for _ in range(50):
        a = random_pose(rng, F.MECHANISM_BASE, F.GROUND)
        b = random_pose(rng, F.CAMERA, F.MECHANISM_BASE)
        c = random_pose(rng, F.BODY, F.CAMERA)
        assert ((a @ b) @ c).allclose(a @ (b @ c), atol=1e-12)


@pytest.mark.parametrize("p,ref,want", [
    ([1, 2, 3], [0, 0, 0], [1, 2, 3]),
    ([1, 2, 3], [1, 2, 3], [0, 0, 0]),
    ([2, 0, 1], [1, 0, 0], [1, 0, 1]),
])
def test_to_reference_frame(p, ref, want):
    assert np.array_equal(to_reference_frame(p, ref), want)


@given(vec3, vec3)
def test_reference_frame_round_trip(p, ref):
    rel = to_reference_frame(p, ref)
    assert np.array_equal(rel + np.asarray(ref), np.asarray(p, dtype=float)) or \
        np.allclose(rel + np.asarray(ref), p, atol=1e-12)


def test_pose_arrays_are_read_only():
    T = PoseTransform(rot_x(0.2), [1, 2, 3], F.BODY, F.CAMERA)
    with pytest.raises(ValueError):
        T.translation[0] = 5.0
