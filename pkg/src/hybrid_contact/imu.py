"""On-manifold IMU preintegration between keyframes.

Deltas are integrated with the usual discrete scheme (rotation first-order
exponential, velocity and position with the rotation at the start of each
step).  Biases are held at their linearisation value; callers rebuild the
deltas when the bias estimate changes instead of applying bias Jacobians.
"""

from dataclasses import dataclass, field

import numpy as np

from . import manifold as mf
from .exceptions import MissingImuAlignment, NonpositiveDt

GRAVITY = np.array([0.0, 0.0, -9.81])


@dataclass(frozen=True)
class ImuSample:
    t: float
    omega: np.ndarray
    acc: np.ndarray


@dataclass(frozen=True)
class ImuBias:
    bg: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ba: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name in ("bg", "ba"):
            v = np.array(getattr(self, name), dtype=float).reshape(3)
            if not np.all(np.isfinite(v)):
                raise ValueError(f"bias {name} must be finite")
            object.__setattr__(self, name, v)

    @classmethod
    def from_vector(cls, b):
        b = np.asarray(b, dtype=float)
        return cls(b[:3], b[3:])

    def as_vector(self):
        return np.concatenate([self.bg, self.ba])


@dataclass(frozen=True)
class ImuNoise:
    """Continuous-time noise densities."""

    gyro_sigma: float = 1e-3        # rad/s/sqrt(Hz)
    accel_sigma: float = 1e-2       # m/s^2/sqrt(Hz)
    gyro_walk: float = 1e-5         # rad/s^2/sqrt(Hz)
    accel_walk: float = 1e-5        # m/s^3/sqrt(Hz)

    def bias_walk_covariance(self, dt):
        return np.diag([self.gyro_walk**2] * 3 + [self.accel_walk**2] * 3) * dt


class PreintegratedImu:
    """Running preintegrated IMU measurement (dR, dv, dp) with 9x9 covariance.

    Covariance ordering is (rotation, velocity, position).
    """

    def __init__(self, bias=None, noise=None, t0=0.0):
        self.bias_lin = bias if bias is not None else ImuBias()
        self.noise = noise if noise is not None else ImuNoise()
        self.delta_R = np.eye(3)
        self.delta_v = np.zeros(3)
        self.delta_p = np.zeros(3)
        self.sigma = np.zeros((9, 9))
        self.dt_total = 0.0
        self.t0 = t0
        self._times = [t0]
        self._rotations = [np.eye(3)]
        self._steps = 0

    def integrate(self, omega, acc, dt):
        """Fold one sample held constant over ``dt`` seconds."""
        if not dt > 0:
            raise NonpositiveDt(f"dt must be positive, got {dt!r}")
        w = np.asarray(omega, dtype=float) - self.bias_lin.bg
        a = np.asarray(acc, dtype=float) - self.bias_lin.ba
        R = self.delta_R
        dR = mf.so3_exp(w * dt)
        Ra = R @ a

        A = np.eye(9)
        A[0:3, 0:3] = dR.T
        A[3:6, 0:3] = -R @ mf.skew(a) * dt
        A[6:9, 0:3] = -0.5 * R @ mf.skew(a) * dt**2
        A[6:9, 3:6] = np.eye(3) * dt
        B = np.zeros((9, 6))
        B[0:3, 0:3] = mf.so3_right_jacobian(w * dt) * dt
        B[3:6, 3:6] = R * dt
        B[6:9, 3:6] = 0.5 * R * dt**2
        Q = np.diag([self.noise.gyro_sigma**2] * 3 + [self.noise.accel_sigma**2] * 3) / dt
        S = A @ self.sigma @ A.T + B @ Q @ B.T
        self.sigma = 0.5 * (S + S.T)

        self.delta_p = self.delta_p + self.delta_v * dt + 0.5 * Ra * dt**2
        self.delta_v = self.delta_v + Ra * dt
        self.delta_R = R @ dR
        self._steps += 1
        if self._steps % mf.REORTHO_EVERY == 0:
            self.delta_R = mf.project_to_so3(self.delta_R)
        self.dt_total += dt
        self._times.append(self.t0 + self.dt_total)
        self._rotations.append(self.delta_R)
        return self

    def rotation_at(self, t, tol=1e-9):
        """Preintegrated rotation from the start time up to sample time ``t``."""
        times = np.asarray(self._times)
        k = int(np.argmin(np.abs(times - t)))
        if abs(times[k] - t) > tol:
            raise MissingImuAlignment(f"no preintegrated rotation at t={t!r}")
        return self._rotations[k]

    @property
    def rotations_at(self):
        return dict(zip(self._times, self._rotations))


def imu_preint_step(p, sample, dt):
    """Functional alias for :meth:`PreintegratedImu.integrate`."""
    return p.integrate(sample.omega, sample.acc, dt)


def preintegrate(omegas, accs, dts, bias=None, noise=None, t0=0.0):
    """Build a :class:`PreintegratedImu` from sample arrays."""
    p = PreintegratedImu(bias, noise, t0)
    for w, a, dt in zip(omegas, accs, dts):
        p.integrate(w, a, dt)
    return p


def rotation_prefix(omegas, dts, bg):
    """Rotations ``dR_0k`` for ``k = 0..n`` with a log-depth prefix product.

    Products are re-projected onto SO(3) at the end of every run of
    ``REORTHO_EVERY`` steps.
    """
    omegas = np.asarray(omegas, dtype=float)
    dts = np.asarray(dts, dtype=float)
    steps = mf.so3_exp_batch((omegas - bg) * dts[:, None])
    out = [np.eye(3)[None]]
    R0 = np.eye(3)
    for start in range(0, len(dts), mf.REORTHO_EVERY):
        P = steps[start:start + mf.REORTHO_EVERY].copy()
        shift = 1
        while shift < len(P):
            P[shift:] = P[:-shift] @ P[shift:]
            shift *= 2
        P = R0[None] @ P
        if len(P) == mf.REORTHO_EVERY:
            P[-1] = mf.project_to_so3(P[-1])
        R0 = P[-1]
        out.append(P)
    return np.concatenate(out)


def preintegrate_deltas(omegas, accs, dts, bias_vector, Rs=None):
    """Vectorised deltas only (no covariance) for a given bias vector.

    Same discrete scheme as :meth:`PreintegratedImu.integrate`; rotations are
    composed in a different order so results agree to round-off.  ``Rs`` may
    pass in a precomputed :func:`rotation_prefix` for the same gyro bias.
    """
    accs = np.asarray(accs, dtype=float)
    dts = np.asarray(dts, dtype=float)
    bias_vector = np.asarray(bias_vector, dtype=float)
    n = len(dts)
    if n == 0:
        return np.eye(3), np.zeros(3), np.zeros(3)
    if Rs is None:
        Rs = rotation_prefix(omegas, dts, bias_vector[:3])
    R = Rs[-1]
    Rs = Rs[:-1]
    Ra = np.einsum("kij,kj->ki", Rs, accs - bias_vector[3:])
    dv_steps = Ra * dts[:, None]
    v_before = np.vstack([np.zeros(3), np.cumsum(dv_steps, axis=0)[:-1]])
    dp = np.sum(v_before * dts[:, None] + 0.5 * Ra * dts[:, None] ** 2, axis=0)
    dv = np.sum(dv_steps, axis=0)
    return R, dv, dp


def preintegrate_deltas_batch(omegas, accs, dts, biases):
    """:func:`preintegrate_deltas` for an (m, 6) stack of bias vectors at once."""
    omegas = np.asarray(omegas, dtype=float)
    accs = np.asarray(accs, dtype=float)
    dts = np.asarray(dts, dtype=float)
    biases = np.atleast_2d(np.asarray(biases, dtype=float))
    m, n = len(biases), len(dts)
    if n == 0:
        return np.broadcast_to(np.eye(3), (m, 3, 3)).copy(), np.zeros((m, 3)), np.zeros((m, 3))
    w = (omegas[None] - biases[:, None, :3]) * dts[None, :, None]
    steps = mf.so3_exp_batch(w.reshape(-1, 3)).reshape(m, n, 3, 3)
    Rs = np.empty((m, n + 1, 3, 3))
    Rs[:, 0] = np.eye(3)
    R0 = np.broadcast_to(np.eye(3), (m, 3, 3))
    for start in range(0, n, mf.REORTHO_EVERY):
        P = steps[:, start:start + mf.REORTHO_EVERY].copy()
        shift = 1
        while shift < P.shape[1]:
            P[:, shift:] = P[:, :-shift] @ P[:, shift:]
            shift *= 2
        P = R0[:, None] @ P
        if P.shape[1] == mf.REORTHO_EVERY:
            P[:, -1] = [mf.project_to_so3(R) for R in P[:, -1]]
        R0 = P[:, -1]
        Rs[:, start + 1:start + 1 + P.shape[1]] = P
    a = accs[None] - biases[:, None, 3:]
    Ra = np.einsum("mkij,mkj->mki", Rs[:, :-1], a)
    dv_steps = Ra * dts[None, :, None]
    cum = np.cumsum(dv_steps, axis=1)
    v_before = np.concatenate([np.zeros((m, 1, 3)), cum[:, :-1]], axis=1)
    dp = np.sum(v_before * dts[None, :, None] + 0.5 * Ra * dts[None, :, None] ** 2, axis=1)
    return Rs[:, -1], cum[:, -1], dp


def imu_factor_residual(Xi, vi, Xj, vj, delta_R, delta_v, delta_p, dt, gravity=GRAVITY):
    """9-vector (rotation, velocity, position) residual."""
    Ri, pi = Xi[:3, :3], Xi[:3, 3]
    Rj, pj = Xj[:3, :3], Xj[:3, 3]
    r_R = mf.so3_log(delta_R.T @ Ri.T @ Rj)
    r_v = Ri.T @ (vj - vi - gravity * dt) - delta_v
    r_p = Ri.T @ (pj - pi - vi * dt - 0.5 * gravity * dt**2) - delta_p
    return np.concatenate([r_R, r_v, r_p])


def bias_random_walk_residual(bi, bj):
    return np.asarray(bj, dtype=float) - np.asarray(bi, dtype=float)
