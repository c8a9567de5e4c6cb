"""Hybrid preintegration of contact measurements across contact switches.

While a foot stays in contact the preintegrated relative contact pose does
not change and only its covariance grows with the slip noise.  At a switch
the measurement is right-multiplied by the contact-to-contact kinematics and
the covariance is carried across with the adjoint of the inverse transform
plus the encoder noise mapped through the switch Jacobian.
"""

from dataclasses import dataclass, field

import numpy as np

from . import manifold as mf
from .exceptions import NonpositiveDt
from .kinematics import COV_REGULARIZATION, EncoderReading


@dataclass(frozen=True)
class ContactNoiseModel:
    """Continuous-time slip twist covariance (angular block first)."""

    sigma_xi: np.ndarray = field(default_factory=lambda: np.diag([1e-4] * 6))

    def __post_init__(self):
        S = np.asarray(self.sigma_xi, dtype=float)
        if S.shape != (6, 6) or np.max(np.abs(S - S.T)) > 1e-12 or np.linalg.eigvalsh(S).min() < -1e-12:
            raise ValueError("sigma_xi must be a symmetric PSD 6x6 matrix")
        object.__setattr__(self, "sigma_xi", S)

    @classmethod
    def isotropic(cls, sigma_rot=0.01, sigma_trans=0.01):
        return cls(np.diag([sigma_rot**2] * 3 + [sigma_trans**2] * 3))


@dataclass(frozen=True)
class SwitchEvent:
    t: float
    src: str
    dst: str
    reading: EncoderReading

    def __post_init__(self):
        if self.src == self.dst:
            raise ValueError("a switch needs two distinct contact frames")


class PreintegratedContact:
    """Running hybrid preintegrated contact measurement and covariance."""

    def __init__(self, start_key=0):
        self.start_key = start_key
        self.delta_C = np.eye(4)
        self.sigma = np.zeros((6, 6))
        self.elapsed = 0.0
        self.switches = []

    def stance_step(self, dt, noise):
        """Flow while in contact: measurement unchanged, covariance grows."""
        if not dt > 0:
            raise NonpositiveDt(f"dt must be positive, got {dt!r}")
        self.sigma = self.sigma + noise.sigma_xi * dt
        self.elapsed += dt
        return self

    def switch(self, event, robot):
        """Reset map at a contact switch."""
        pair = (event.src, event.dst)
        alpha = event.reading.alpha
        H = robot.fk_contact_to_contact(pair, alpha)
        J = robot.jacobian_contact_to_contact(pair, alpha)
        Ad = mf.adjoint(mf.inverse(H))
        S = Ad @ self.sigma @ Ad.T + J @ event.reading.sigma_alpha @ J.T
        self.sigma = 0.5 * (S + S.T)
        self.delta_C = self.delta_C @ H
        self.switches.append(event)
        return self

    def compose(self, later):
        """Chain with a preintegration that starts where this one ends."""
        out = PreintegratedContact(self.start_key)
        Ad = mf.adjoint(mf.inverse(later.delta_C))
        S = Ad @ self.sigma @ Ad.T + later.sigma
        out.sigma = 0.5 * (S + S.T)
        out.delta_C = self.delta_C @ later.delta_C
        out.elapsed = self.elapsed + later.elapsed
        out.switches = self.switches + later.switches
        return out

    def residual(self, C_i, C_j):
        """``Log(C_j^-1 C_i dC)``."""
        return mf.se3_log(mf.inverse(C_j) @ C_i @ self.delta_C)

    def factor_covariance(self):
        return self.sigma + COV_REGULARIZATION * np.eye(6)


def preint_init(start_key=0):
    return PreintegratedContact(start_key)


def run_schedule(schedule, noise, robot, start_key=0):
    """Preintegrate a schedule of ``("stance", dt)`` / ``("switch", event)`` steps."""
    p = PreintegratedContact(start_key)
    for kind, arg in schedule:
        if kind == "stance":
            p.stance_step(arg, noise)
        elif kind == "switch":
            p.switch(arg, robot)
        else:
            raise ValueError(f"unknown schedule step {kind!r}")
    return p


def preint_brute_force_oracle(seed, schedule, noise, robot, n_samples=10_000):
    """Monte-Carlo covariance of the hybrid contact noise.

    Every sample integrates the noisy discrete hybrid model directly, as a
    product of slip exponentials and switch transforms evaluated at perturbed
    encoder values, and measures ``Log(dC^-1 dC_sample)`` against the
    noise-free preintegrated measurement.
    """
    if n_samples < 1000:
        raise ValueError("the oracle needs at least 1000 samples")
    rng = np.random.Generator(np.random.PCG64(seed))
    nominal = run_schedule(schedule, noise, robot).delta_C
    C = np.broadcast_to(np.eye(4), (n_samples, 4, 4)).copy()
    for kind, arg in schedule:
        if kind == "stance":
            eps = rng.multivariate_normal(np.zeros(6), noise.sigma_xi * arg, n_samples, method="eigh")
            C = C @ mf.se3_exp_batch(-eps)
        else:
            n = rng.multivariate_normal(np.zeros(robot.n_joints), arg.reading.sigma_alpha,
                                        n_samples, method="eigh")
            C = C @ robot.fk_contact_to_contact_batch((arg.src, arg.dst), arg.reading.alpha - n)
    E = mf.inverse(nominal)[None] @ C
    errs = np.array([mf.se3_log(e) for e in E])
    return np.cov(errs, rowvar=False, bias=True)


class ContactTracker:
    """Tracks a single contact frame from per-foot contact bits.

    In double support the tracked foot is kept until its own bit drops.
    """

    def __init__(self, frames):
        self.frames = list(frames)
        self.current = None

    def update(self, contacts):
        """Feed one contact map; return ``(src, dst)`` on a switch, else None."""
        if self.current is None:
            for f in self.frames:
                if contacts.get(f, False):
                    self.current = f
                    break
            return None
        if contacts.get(self.current, False):
            return None
        for f in self.frames:
            if f != self.current and contacts.get(f, False):
                src, self.current = self.current, f
                return src, f
        return None


# point contact ---------------------------------------------------------------

class PointContactPreintegrated:
    """Preintegrated contact position for point feet (orientation free).

    The measurement is expressed in the base frame at the start keyframe and
    needs the preintegrated IMU rotation at every event time.
    """

    def __init__(self):
        self.delta_d = np.zeros(3)
        self.sigma_d = np.zeros((3, 3))
        self.switches = []

    def stance_step(self, t, dt, frame, reading, sigma_v, imu, robot):
        if not dt > 0:
            raise NonpositiveDt(f"dt must be positive, got {dt!r}")
        dR = imu.rotation_at(t)
        R_bc = robot.fk_base_to_contact(frame, reading.alpha)[:3, :3]
        M = dR @ R_bc
        S = self.sigma_d + M @ np.asarray(sigma_v) @ M.T * dt
        self.sigma_d = 0.5 * (S + S.T)
        return self

    def switch(self, event, imu, robot):
        dR = imu.rotation_at(event.t)
        pair = (event.src, event.dst)
        alpha = event.reading.alpha
        self.delta_d = self.delta_d + dR @ _switch_offset(robot, pair, alpha)
        G = _switch_offset_jacobian(robot, pair, alpha)
        S = self.sigma_d + dR @ G @ event.reading.sigma_alpha @ G.T @ dR.T
        self.sigma_d = 0.5 * (S + S.T)
        self.switches.append(event)
        return self

    def residual(self, R_i, d_i, d_j):
        return R_i.T @ (np.asarray(d_j) - np.asarray(d_i)) - self.delta_d


def _switch_offset(robot, pair, alpha):
    """``R_BC-(alpha) p_C-C+(alpha)``: new contact position in base axes."""
    src, dst = pair
    R_src = robot.fk_base_to_contact(src, alpha)[:3, :3]
    return R_src @ robot.fk_contact_to_contact(pair, alpha)[:3, 3]


def _switch_offset_jacobian(robot, pair, alpha, h=1e-6):
    G = np.zeros((3, alpha.size))
    for i in range(alpha.size):
        step = np.zeros(alpha.size)
        step[i] = h
        G[:, i] = (_switch_offset(robot, pair, alpha + step)
                   - _switch_offset(robot, pair, alpha - step)) / (2.0 * h)
    return G


def point_brute_force_oracle(seed, schedule, sigma_v, imu, robot, n_samples=10_000):
    """Monte-Carlo covariance of the point-contact preintegration noise.

    ``schedule`` holds ``("stance", (t, dt, frame, reading))`` and
    ``("switch", event)`` steps; IMU rotations are treated as exact.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    nominal = np.zeros(3)
    total = np.zeros((n_samples, 3))
    for kind, arg in schedule:
        if kind == "stance":
            t, dt, frame, reading = arg
            dR = imu.rotation_at(t)
            n_a = rng.multivariate_normal(np.zeros(robot.n_joints), reading.sigma_alpha,
                                          n_samples, method="eigh")
            R_bc = robot.fk_base_to_contact_batch(frame, reading.alpha - n_a)[:, :3, :3]
            slip = rng.multivariate_normal(np.zeros(3), np.asarray(sigma_v) * dt,
                                           n_samples, method="eigh")
            total -= np.einsum("ij,kjl,kl->ki", dR, R_bc, slip)
        else:
            dR = imu.rotation_at(arg.t)
            pair = (arg.src, arg.dst)
            nominal = nominal + dR @ _switch_offset(robot, pair, arg.reading.alpha)
            n_a = rng.multivariate_normal(np.zeros(robot.n_joints), arg.reading.sigma_alpha,
                                          n_samples, method="eigh")
            a = arg.reading.alpha - n_a
            A = robot.fk_base_to_contact_batch(arg.src, a)
            B = robot.fk_base_to_contact_batch(arg.dst, a)
            offset = B[:, :3, 3] - A[:, :3, 3]
            total += offset @ dR.T
    errs = nominal[None] - total
    return np.cov(errs, rowvar=False, bias=True)
