"""SO(3) / SE(3) operations on plain numpy arrays.

Poses are 4x4 homogeneous matrices, rotations 3x3 matrices and twists
6-vectors ordered ``(omega, v)`` with the angular block first.  All functions
are pure and never modify their inputs.
"""

import math

import numpy as np
from scipy.spatial.transform import Rotation as _ScipyRotation

from .exceptions import AngleNearPi

SMALL_ANGLE = 1e-8
NEAR_PI = 1e-6
SERIES_ANGLE = 1e-3
REORTHO_EVERY = 1000
_I3 = np.eye(3)
_I3.flags.writeable = False


def skew(w):
    """3-vector -> 3x3 skew-symmetric matrix."""
    x, y, z = w
    return np.array([[0.0, -z, y],
                     [z, 0.0, -x],
                     [-y, x, 0.0]])


def unskew(W):
    return np.array([W[2, 1], W[0, 2], W[1, 0]])


def wedge(xi):
    """Twist (omega, v) -> 4x4 element of se(3)."""
    xi = np.asarray(xi, dtype=float)
    M = np.zeros((4, 4))
    M[:3, :3] = skew(xi[:3])
    M[:3, 3] = xi[3:]
    return M


def vee(M):
    """Inverse of :func:`wedge`."""
    return np.concatenate([unskew(M[:3, :3]), M[:3, 3]])


def make_pose(R=None, p=None):
    H = np.eye(4)
    if R is not None:
        H[:3, :3] = R
    if p is not None:
        H[:3, 3] = p
    return H


def inverse(H):
    """Closed-form inverse of a rigid transform."""
    RT = H[:3, :3].T
    Hi = np.empty((4, 4))
    Hi[:3, :3] = RT
    Hi[:3, 3] = -RT @ H[:3, 3]
    Hi[3] = (0.0, 0.0, 0.0, 1.0)
    return Hi


def _half_versine(theta):
    """``(1 - cos t) / t^2`` without cancellation at small ``t``."""
    s = math.sin(0.5 * theta) / theta
    return 2.0 * s * s


def _third_coeff(theta):
    """``(t - sin t) / t^3``, by its series below ``SERIES_ANGLE``."""
    if theta < SERIES_ANGLE:
        t2 = theta * theta
        return 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    return (theta - math.sin(theta)) / theta**3


def so3_exp(w):
    w = np.asarray(w, dtype=float)
    theta = np.sqrt(w @ w)
    W = skew(w)
    if theta < SMALL_ANGLE:
        return np.eye(3) + W + 0.5 * (W @ W)
    a = np.sin(theta) / theta
    b = _half_versine(theta)
    return np.eye(3) + a * W + b * (W @ W)


def so3_exp_batch(ws):
    """Vectorised Rodrigues formula for an (n, 3) array of rotation vectors."""
    ws = np.asarray(ws, dtype=float)
    theta = np.linalg.norm(ws, axis=1)
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0, np.sin(safe) / safe)
    b = np.where(small, 0.5, 2.0 * (np.sin(0.5 * safe) / safe) ** 2)
    W = np.zeros((len(ws), 3, 3))
    W[:, 0, 1] = -ws[:, 2]
    W[:, 0, 2] = ws[:, 1]
    W[:, 1, 0] = ws[:, 2]
    W[:, 1, 2] = -ws[:, 0]
    W[:, 2, 0] = -ws[:, 1]
    W[:, 2, 1] = ws[:, 0]
    WW = W @ W
    return np.eye(3)[None] + a[:, None, None] * W + b[:, None, None] * WW


def se3_exp_batch(xis):
    """Vectorised :func:`se3_exp` for an (n, 6) array of twists."""
    xis = np.asarray(xis, dtype=float)
    w, v = xis[:, :3], xis[:, 3:]
    theta = np.linalg.norm(w, axis=1)
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    b = np.where(small, 0.5, 2.0 * (np.sin(0.5 * safe) / safe) ** 2)
    t2 = theta**2
    series = 1.0 / 6.0 - t2 / 120.0 + t2**2 / 5040.0
    c = np.where(theta < SERIES_ANGLE, series, (safe - np.sin(safe)) / safe**3)
    R = so3_exp_batch(w)
    W = np.zeros((len(xis), 3, 3))
    W[:, 0, 1] = -w[:, 2]
    W[:, 0, 2] = w[:, 1]
    W[:, 1, 0] = w[:, 2]
    W[:, 1, 2] = -w[:, 0]
    W[:, 2, 0] = -w[:, 1]
    W[:, 2, 1] = w[:, 0]
    V = np.eye(3)[None] + b[:, None, None] * W + c[:, None, None] * (W @ W)
    H = np.zeros((len(xis), 4, 4))
    H[:, :3, :3] = R
    H[:, :3, 3] = np.einsum("kij,kj->ki", V, v)
    H[:, 3, 3] = 1.0
    return H


def _rotation_angle(R):
    sx, sy, sz = R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]
    s = 0.5 * math.sqrt(sx * sx + sy * sy + sz * sz)
    c = 0.5 * (R[0, 0] + R[1, 1] + R[2, 2] - 1.0)
    return math.atan2(s, c)


def so3_log(R):
    theta = _rotation_angle(R)
    if theta > np.pi - NEAR_PI:
        raise AngleNearPi(f"rotation angle {theta!r} is within {NEAR_PI} of pi")
    A = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < SMALL_ANGLE:
        return 0.5 * A
    return theta / (2.0 * math.sin(theta)) * A


def _left_jacobian_coeffs(theta):
    """Coefficients (b, c) of V = I + b W + c W^2."""
    if theta < SMALL_ANGLE:
        return 0.5, 1.0 / 6.0
    return _half_versine(theta), _third_coeff(theta)


def so3_left_jacobian(w):
    w = np.asarray(w, dtype=float)
    b, c = _left_jacobian_coeffs(np.sqrt(w @ w))
    W = skew(w)
    return np.eye(3) + b * W + c * (W @ W)


def so3_right_jacobian(w):
    return so3_left_jacobian(-np.asarray(w, dtype=float))


def se3_exp(xi):
    """Closed-form exponential: Rodrigues rotation, V-matrix translation."""
    xi = np.asarray(xi, dtype=float)
    w, v = xi[:3], xi[3:]
    theta = math.sqrt(w @ w)
    W = skew(w)
    WW = W @ W
    if theta < SMALL_ANGLE:
        a, b, c = 1.0, 0.5, 1.0 / 6.0
    else:
        a = math.sin(theta) / theta
        b = _half_versine(theta)
        c = _third_coeff(theta)
    H = np.empty((4, 4))
    H[:3, :3] = _I3 + a * W + b * WW
    H[:3, 3] = v + b * (W @ v) + c * (WW @ v)
    H[3] = (0.0, 0.0, 0.0, 1.0)
    return H


def se3_log(H):
    """Inverse of :func:`se3_exp`; raises :class:`AngleNearPi` near pi."""
    p = H[:3, 3]
    w = so3_log(H[:3, :3])
    theta = math.sqrt(w @ w)
    W = skew(w)
    if theta < 1e-3:
        # series of (1 - theta sin / (2 (1 - cos))) / theta^2
        d = 1.0 / 12.0 + theta**2 / 720.0 + theta**4 / 30240.0
    else:
        d = (1.0 - theta * math.sin(theta) / (2.0 * (1.0 - math.cos(theta)))) / theta**2
    Wp = W @ p
    return np.concatenate([w, p - 0.5 * Wp + d * (W @ Wp)])


def _cross(a, b):
    """Row-wise cross product of two (n, 3) arrays."""
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    out[:, 0] = a[:, 1] * b[:, 2] - a[:, 2] * b[:, 1]
    out[:, 1] = a[:, 2] * b[:, 0] - a[:, 0] * b[:, 2]
    out[:, 2] = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    return out


def so3_log_batch(Rs):
    """Vectorised :func:`so3_log` for an (n, 3, 3) stack."""
    Rs = np.asarray(Rs, dtype=float)
    A = np.empty((len(Rs), 3))
    A[:, 0] = Rs[:, 2, 1] - Rs[:, 1, 2]
    A[:, 1] = Rs[:, 0, 2] - Rs[:, 2, 0]
    A[:, 2] = Rs[:, 1, 0] - Rs[:, 0, 1]
    s = 0.5 * np.sqrt(np.einsum("ki,ki->k", A, A))
    c = 0.5 * (Rs[:, 0, 0] + Rs[:, 1, 1] + Rs[:, 2, 2] - 1.0)
    theta = np.arctan2(s, c)
    if np.any(theta > np.pi - NEAR_PI):
        raise AngleNearPi(f"rotation angle {theta.max()!r} is within {NEAR_PI} of pi")
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    k = np.where(small, 0.5, safe / (2.0 * np.sin(safe)))
    return k[:, None] * A


def se3_log_batch(Hs):
    """Vectorised :func:`se3_log` for an (n, 4, 4) stack."""
    Hs = np.asarray(Hs, dtype=float)
    w = so3_log_batch(Hs[:, :3, :3])
    p = Hs[:, :3, 3]
    theta = np.sqrt(np.einsum("ki,ki->k", w, w))
    series = theta < 1e-3
    safe = np.where(series, 1.0, theta)
    d = np.where(series, 1.0 / 12.0 + theta**2 / 720.0 + theta**4 / 30240.0,
                 (1.0 - safe * np.sin(safe) / (2.0 * (1.0 - np.cos(safe)))) / safe**2)
    Wp = _cross(w, p)
    WWp = _cross(w, Wp)
    return np.concatenate([w, p - 0.5 * Wp + d[:, None] * WWp], axis=1)


def inverse_batch(Hs):
    Hs = np.asarray(Hs, dtype=float)
    RT = np.swapaxes(Hs[:, :3, :3], 1, 2)
    out = np.zeros_like(Hs)
    out[:, :3, :3] = RT
    out[:, :3, 3] = -np.einsum("kij,kj->ki", RT, Hs[:, :3, 3])
    out[:, 3, 3] = 1.0
    return out


def adjoint(H):
    """6x6 adjoint [[R, 0], [p^ R, R]] in (omega, v) ordering."""
    R = H[:3, :3]
    Ad = np.zeros((6, 6))
    Ad[:3, :3] = R
    Ad[3:, 3:] = R
    Ad[3:, :3] = skew(H[:3, 3]) @ R
    return Ad


def retract(H, dx):
    """Right retraction ``H Exp(dx)``."""
    return H @ se3_exp(dx)


def between(A, B):
    """``A^-1 B``."""
    return inverse(A) @ B


def project_to_so3(R):
    """Nearest rotation matrix in the Frobenius sense (polar decomposition)."""
    U, _, Vt = np.linalg.svd(R)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt))
    return U @ D @ Vt


def is_rotation(R, tol=1e-9):
    R = np.asarray(R)
    if R.shape != (3, 3):
        return False
    return (np.linalg.norm(R.T @ R - np.eye(3)) <= tol
            and abs(np.linalg.det(R) - 1.0) <= tol)


def is_pose(H, tol=1e-9):
    H = np.asarray(H)
    return (H.shape == (4, 4) and np.array_equal(H[3], [0.0, 0.0, 0.0, 1.0])
            and is_rotation(H[:3, :3], tol))


def is_tangent_covariance(S, sym_tol=1e-12, psd_tol=1e-10):
    S = np.asarray(S)
    if S.shape != (6, 6) or np.max(np.abs(S - S.T)) > sym_tol:
        return False
    return np.linalg.eigvalsh(0.5 * (S + S.T)).min() >= -psd_tol


class PoseAccumulator:
    """Long-lived product of poses with periodic re-orthonormalisation.

    The rotation block is projected back onto SO(3) every ``every``
    multiplications so round-off does not build up in long chains.
    """

    def __init__(self, H=None, every=REORTHO_EVERY):
        self.H = np.eye(4) if H is None else np.array(H, dtype=float)
        self.every = every
        self._count = 0

    def compose(self, D):
        self.H = self.H @ D
        self._count += 1
        if self._count % self.every == 0:
            self.H[:3, :3] = project_to_so3(self.H[:3, :3])
        return self.H


def rpy_to_rotation(roll, pitch, yaw):
    """Fixed-axis roll/pitch/yaw: ``Rz(yaw) Ry(pitch) Rx(roll)``."""
    return _ScipyRotation.from_euler("ZYX", [yaw, pitch, roll]).as_matrix()


def rpy_to_rotation_batch(roll, pitch, yaw):
    angles = np.stack([np.ravel(yaw), np.ravel(pitch), np.ravel(roll)], axis=-1)
    return _ScipyRotation.from_euler("ZYX", angles).as_matrix()


def rotation_to_quat(R):
    """Rotation matrix -> unit quaternion (w, x, y, z) with w >= 0."""
    x, y, z, w = _ScipyRotation.from_matrix(R).as_quat()
    q = np.array([w, x, y, z])
    return q if w >= 0 else -q


def quat_to_rotation(q):
    w, x, y, z = q
    return _ScipyRotation.from_quat([x, y, z, w]).as_matrix()


def pose_to_qp(H):
    return rotation_to_quat(H[:3, :3]), H[:3, 3].copy()


def qp_to_pose(q, p):
    return make_pose(quat_to_rotation(q), np.asarray(p, dtype=float))
