import time

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.transform import Rotation

from hybrid_contact import manifold as mf
from hybrid_contact.exceptions import AngleNearPi

finite = st.floats(-1.0, 1.0, allow_nan=False, allow_infinity=False)
twists = arrays(np.float64, 6, elements=finite)


def bounded(xi, limit=1.0):
    n = np.linalg.norm(xi)
    return xi if n <= limit else xi * (limit / n)


def test_wedge_examples():
    assert np.array_equal(mf.wedge(np.zeros(6)), np.zeros((4, 4)))
    M = mf.wedge([0, 0, 1, 0, 0, 0])
    assert M[1, 0] == 1.0 and M[0, 1] == -1.0
    assert np.array_equal(M[:3, 3], np.zeros(3))


@given(twists)
def test_wedge_is_antisymmetric_and_inverts(xi):
    M = mf.wedge(xi)
    assert np.array_equal((M + M.T)[:3, :3], np.zeros((3, 3)))
    assert np.array_equal(mf.vee(M), xi)


def test_exp_examples():
    assert np.array_equal(mf.se3_exp(np.zeros(6)), np.eye(4))
    H = mf.se3_exp([0, 0, np.pi / 2, 0, 0, 0])
    Rz = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    np.testing.assert_allclose(H[:3, :3], Rz, atol=1e-15)
    np.testing.assert_allclose(H[:3, 3], 0.0, atol=0)
    H = mf.se3_exp([0, 0, 0, 1, 2, 3])
    np.testing.assert_array_equal(H[:3, :3], np.eye(3))
    np.testing.assert_array_equal(H[:3, 3], [1, 2, 3])


def test_exp_screw_translation_closed_form():
    # quarter turn about z while translating along x: V v = (2/pi, 2/pi, 0)
    H = mf.se3_exp([0, 0, np.pi / 2, 1, 0, 0])
    np.testing.assert_allclose(H[:3, 3], [2 / np.pi, 2 / np.pi, 0.0], atol=1e-15)


@given(twists)
def test_exp_matches_matrix_exponential(xi):
    xi = bounded(xi * 3.0, 3.0)
    np.testing.assert_allclose(mf.se3_exp(xi), scipy.linalg.expm(mf.wedge(xi)), atol=1e-12)


@given(arrays(np.float64, 3, elements=finite))
def test_so3_exp_matches_rotvec(w):
    np.testing.assert_allclose(mf.so3_exp(w), Rotation.from_rotvec(w).as_matrix(), atol=1e-14)


def test_log_examples():
    np.testing.assert_array_equal(mf.se3_log(np.eye(4)), np.zeros(6))
    xi = np.array([0.3, 0.0, 0.0, 0.1, -0.2, 0.5])
    np.testing.assert_allclose(mf.se3_log(mf.se3_exp(xi)), xi, atol=1e-14)
    H = mf.make_pose(p=[0.4, -1.0, 2.0])
    np.testing.assert_allclose(mf.se3_log(H), [0, 0, 0, 0.4, -1.0, 2.0], atol=0)


def test_log_matches_matrix_logarithm(rng):
    for _ in range(50):
        xi = bounded(rng.normal(size=6), 2.0)
        H = mf.se3_exp(xi)
        np.testing.assert_allclose(mf.wedge(mf.se3_log(H)), np.real(scipy.linalg.logm(H)), atol=1e-9)


def test_log_near_pi_raises():
    R = mf.so3_exp([0, 0, np.pi - 1e-7])
    with pytest.raises(AngleNearPi):
        mf.so3_log(R)
    with pytest.raises(AngleNearPi):
        mf.se3_log(mf.make_pose(R))
    # just outside the band is fine
    w = np.array([0, 0, np.pi - 1e-4])
    np.testing.assert_allclose(mf.so3_log(mf.so3_exp(w)), w, atol=1e-9)


def test_small_angle_branch_is_continuous():
    for theta in (1e-10, 1e-8, 1e-7, 1e-5):
        xi = np.array([theta, 0, 0, 1.0, 0.5, 0.0])
        np.testing.assert_allclose(mf.se3_exp(xi), scipy.linalg.expm(mf.wedge(xi)), atol=1e-15)
        np.testing.assert_allclose(mf.se3_log(mf.se3_exp(xi)), xi, atol=1e-15)


@settings(max_examples=200)
@given(twists)
def test_round_trip(xi):
    xi = bounded(xi)
    np.testing.assert_allclose(mf.se3_log(mf.se3_exp(xi)), xi, atol=1e-9)


def test_adjoint_examples(rng):
    np.testing.assert_array_equal(mf.adjoint(np.eye(4)), np.eye(6))
    R = mf.so3_exp([0.2, -0.4, 0.9])
    Ad = mf.adjoint(mf.make_pose(R))
    np.testing.assert_array_equal(Ad[:3, :3], R)
    np.testing.assert_array_equal(Ad[3:, 3:], R)
    np.testing.assert_array_equal(Ad[3:, :3], np.zeros((3, 3)))


@given(twists, twists)
def test_adjoint_identity(a, xi):
    H = mf.se3_exp(bounded(a) * 2.0)
    xi = bounded(xi)
    lhs = mf.se3_exp(mf.adjoint(H) @ xi)
    rhs = H @ mf.se3_exp(xi) @ mf.inverse(H)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


@given(twists, twists)
def test_adjoint_homomorphism(a, b):
    A, B = mf.se3_exp(bounded(a)), mf.se3_exp(bounded(b))
    np.testing.assert_allclose(mf.adjoint(A @ B), mf.adjoint(A) @ mf.adjoint(B), atol=1e-12)
    np.testing.assert_allclose(mf.adjoint(mf.inverse(A)), np.linalg.inv(mf.adjoint(A)), atol=1e-12)


def test_retract_examples(rng):
    H = mf.se3_exp(rng.normal(size=6) * 0.5)
    np.testing.assert_array_equal(mf.retract(H, np.zeros(6)), H)
    xi = rng.normal(size=6) * 0.5
    np.testing.assert_allclose(mf.retract(np.eye(4), xi), mf.se3_exp(xi), atol=0)
    np.testing.assert_allclose(mf.se3_log(mf.inverse(H) @ mf.retract(H, xi)), xi, atol=1e-12)
    np.testing.assert_allclose(mf.retract(mf.retract(H, xi), -xi), H, atol=1e-14)


def test_inverse_matches_numpy(rng):
    for _ in range(20):
        H = mf.se3_exp(rng.normal(size=6))
        np.testing.assert_allclose(mf.inverse(H), np.linalg.inv(H), atol=1e-13)
        assert mf.is_pose(mf.inverse(H))


def test_batch_versions_agree(rng):
    xis = rng.normal(size=(64, 6))
    xis[:, :3] *= 0.8
    xis[0] = 0.0
    xis[1, :3] = [1e-9, 0, 0]
    H = mf.se3_exp_batch(xis)
    for k in range(len(xis)):
        np.testing.assert_allclose(H[k], mf.se3_exp(xis[k]), atol=1e-15)
    np.testing.assert_allclose(mf.se3_log_batch(H), [mf.se3_log(h) for h in H], atol=1e-13)
    np.testing.assert_allclose(mf.so3_exp_batch(xis[:, :3]), H[:, :3, :3], atol=0)
    np.testing.assert_allclose(mf.inverse_batch(H), [mf.inverse(h) for h in H], atol=0)
    with pytest.raises(AngleNearPi):
        mf.so3_log_batch(mf.so3_exp_batch(np.array([[0, 0, np.pi]])))


def test_quaternion_round_trip(rng):
    for _ in range(50):
        H = mf.se3_exp(rng.normal(size=6))
        q, p = mf.pose_to_qp(H)
        assert abs(np.linalg.norm(q) - 1.0) < 1e-12 and q[0] >= 0
        np.testing.assert_allclose(mf.qp_to_pose(q, p), H, atol=1e-14)
    q, _ = mf.pose_to_qp(mf.se3_exp([0, 0, np.pi / 2, 0, 0, 0]))
    np.testing.assert_allclose(q, [np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)], atol=1e-15)


def test_pose_accumulator_stays_orthonormal(rng):
    D = mf.se3_exp(rng.normal(size=6) * 1e-2)
    acc = mf.PoseAccumulator()
    naive = np.eye(4)
    for _ in range(5000):
        acc.compose(D)
        naive = naive @ D
    assert mf.is_pose(acc.H, tol=1e-12)
    np.testing.assert_allclose(acc.H, naive, atol=1e-9)


def test_tangent_covariance_check():
    assert mf.is_tangent_covariance(np.eye(6))
    S = np.eye(6)
    S[0, 1] = 1e-6
    assert not mf.is_tangent_covariance(S)
    assert not mf.is_tangent_covariance(-np.eye(6))


def test_lie_suite_runtime(rng):
    xis = rng.normal(size=(1000, 6))
    xis /= np.maximum(1.0, np.linalg.norm(xis, axis=1))[:, None]
    start = time.perf_counter()
    for xi in xis:
        mf.se3_log(mf.se3_exp(xi))
    assert time.perf_counter() - start < 1.0
