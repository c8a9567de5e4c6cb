"""Deterministic bipedal walking scenarios with ground truth and noisy sensors.

The base follows a smooth analytic path (forward walk along a gentle S curve,
lateral sway towards the stance foot, vertical bob, small roll and pitch).
Footholds are fixed world poses on flat ground; the stance foot is pinned to
its foothold for the whole stance phase, the swing foot follows a quintic
blend with a sinusoidal lift.  Joint angles come from damped least-squares
inverse kinematics of the demo biped.

IMU samples are generated so that the discrete preintegration scheme in
:mod:`hybrid_contact.imu` reproduces the true rotation and velocity exactly
over each sample period: the gyro sample is ``Log(R_k^T R_k+1) / dt`` and the
accelerometer sample the body-frame mean specific force over the period.
"""

import functools
import logging
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import manifold as mf
from .exceptions import InfeasibleConfig
from .imu import GRAVITY
from .kinematics import demo_biped

log = logging.getLogger(__name__)

IK_TOL = 1e-12
IK_MAX_ITER = 50
IK_DAMPING = 1e-9
MIN_SINGULAR_VALUE = 1e-2


@dataclass(frozen=True)
class ScenarioConfig:
    duration: float = 10.0
    step_period: float = 0.6
    step_length: float = 0.3
    imu_rate: float = 400.0
    encoder_rate: float = 400.0
    cam_rate: float = 20.0
    keyframe_dt: float = 0.25
    base_height: float = 0.98
    sway: float = 0.04
    bob: float = 0.01
    roll_amplitude: float = 0.03
    pitch_amplitude: float = 0.02
    curve_amplitude: float = 0.5
    curve_period: float = 20.0
    swing_height: float = 0.08
    foot_width: float = 0.135
    sigma_alpha: float = 2e-3
    gyro_sigma: float = 1e-3
    accel_sigma: float = 1e-2
    gyro_walk: float = 1e-5
    accel_walk: float = 1e-5
    relpose_sigma_rot: float = 1e-4
    relpose_sigma_trans: float = 5e-3
    # slip allowance handed to the estimator; simulated stance feet never slip
    contact_sigma_rot: float = 1e-3
    contact_sigma_trans: float = 1e-3
    dropout_windows: tuple = ()
    seed: int = 0

    def __post_init__(self):
        for name in ("imu_rate", "encoder_rate", "cam_rate", "keyframe_dt", "duration", "step_period"):
            if not getattr(self, name) > 0:
                raise InfeasibleConfig(f"{name} must be positive")
        windows = tuple((float(a), float(b)) for a, b in self.dropout_windows)
        for a, b in windows:
            if not (0.0 <= a <= b <= self.duration):
                raise InfeasibleConfig(f"dropout window ({a}, {b}) outside [0, {self.duration}]")
        object.__setattr__(self, "dropout_windows", windows)

    def noise_free(self):
        return replace(self, sigma_alpha=0.0, gyro_sigma=0.0, accel_sigma=0.0, gyro_walk=0.0,
                       accel_walk=0.0, relpose_sigma_rot=0.0, relpose_sigma_trans=0.0)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


_TRUTH_FIELDS = ("duration", "step_period", "step_length", "imu_rate", "encoder_rate",
                 "base_height", "sway",
                 "bob", "roll_amplitude", "pitch_amplitude", "curve_amplitude", "curve_period",
                 "swing_height", "foot_width")


@dataclass
class GroundTruth:
    t: np.ndarray
    X: np.ndarray
    v: np.ndarray
    C: np.ndarray
    stance: list
    alpha: np.ndarray
    bg: np.ndarray
    ba: np.ndarray
    switch_times: np.ndarray
    frames: tuple = ("left", "right")


@dataclass
class Dataset:
    """In-memory sensor streams; see :mod:`hybrid_contact.io` for the file form."""

    imu_t: np.ndarray
    imu_w: np.ndarray
    imu_a: np.ndarray
    enc_t: np.ndarray
    enc_alpha: np.ndarray
    contact: np.ndarray
    frames: tuple
    relpose: list = field(default_factory=list)
    initial: dict = None


# analytic base trajectory ----------------------------------------------------

class _Gait:
    def __init__(self, cfg):
        self.cfg = cfg
        self.T = cfg.step_period
        self.u = cfg.step_length / cfg.step_period
        self.Om = 2.0 * np.pi / cfg.curve_period
        self._footholds = {}

    def centre(self, t):
        t = np.asarray(t, dtype=float)
        A, Om, u = self.cfg.curve_amplitude, self.Om, self.u
        c = np.stack([u * t, A * np.sin(Om * t)], axis=-1)
        cd = np.stack([np.full_like(t, u), A * Om * np.cos(Om * t)], axis=-1)
        cdd = np.stack([np.zeros_like(t), -A * Om**2 * np.sin(Om * t)], axis=-1)
        return c, cd, cdd

    def heading(self, t):
        _, cd, cdd = self.centre(t)
        psi = np.arctan2(cd[..., 1], cd[..., 0])
        psid = (cd[..., 0] * cdd[..., 1] - cd[..., 1] * cdd[..., 0]) / (cd[..., 0]**2 + cd[..., 1]**2)
        return psi, psid

    def base(self, t):
        """Base position, velocity and rotation at times ``t``."""
        t = np.asarray(t, dtype=float)
        cfg, T = self.cfg, self.T
        c, cd, _ = self.centre(t)
        psi, psid = self.heading(t)
        n = np.stack([-np.sin(psi), np.cos(psi)], axis=-1)
        nd = -psid[..., None] * np.stack([np.cos(psi), np.sin(psi)], axis=-1)
        s = cfg.sway * np.sin(np.pi * t / T)
        sd = cfg.sway * np.pi / T * np.cos(np.pi * t / T)
        pxy = c + s[..., None] * n
        vxy = cd + sd[..., None] * n + s[..., None] * nd
        z = cfg.base_height + cfg.bob * np.cos(2.0 * np.pi * t / T)
        zd = -cfg.bob * 2.0 * np.pi / T * np.sin(2.0 * np.pi * t / T)
        p = np.concatenate([pxy, z[..., None]], axis=-1)
        v = np.concatenate([vxy, zd[..., None]], axis=-1)
        roll = cfg.roll_amplitude * np.sin(np.pi * t / T)
        pitch = cfg.pitch_amplitude * np.sin(2.0 * np.pi * t / T)
        R = mf.rpy_to_rotation_batch(roll, pitch, psi)
        return p, v, R

    def foothold(self, n):
        """World pose of foothold ``n`` (stance phase ``[nT, (n+1)T)``)."""
        if n not in self._footholds:
            self._footholds[n] = self._foothold(n)
        return self._footholds[n]

    def _foothold(self, n):
        tm = (n + 0.5) * self.T
        c, _, _ = self.centre(np.array([tm]))
        psi, _ = self.heading(np.array([tm]))
        side = 1.0 if n % 2 == 0 else -1.0
        nrm = np.array([-np.sin(psi[0]), np.cos(psi[0])])
        xy = c[0] + side * self.cfg.foot_width * nrm
        return mf.make_pose(mf.rpy_to_rotation(0.0, 0.0, psi[0]), [xy[0], xy[1], 0.0])

    def swing(self, n, tau):
        """Swing foot pose during phase ``n`` at normalised time ``tau``."""
        A = self.foothold(n - 1)
        B = self.foothold(n + 1)
        b = 10 * tau**3 - 15 * tau**4 + 6 * tau**5
        xy = (1 - b) * A[:2, 3] + b * B[:2, 3]
        ya = np.arctan2(A[1, 0], A[0, 0])
        yb = np.arctan2(B[1, 0], B[0, 0])
        yaw = ya + b * np.arctan2(np.sin(yb - ya), np.cos(yb - ya))
        z = self.cfg.swing_height * np.sin(np.pi * tau) ** 2
        return mf.make_pose(mf.rpy_to_rotation(0.0, 0.0, yaw), [xy[0], xy[1], z])


# inverse kinematics ----------------------------------------------------------

def solve_ik(chain, target, guess, tol=IK_TOL, max_iter=IK_MAX_ITER, damping=IK_DAMPING):
    """Damped least-squares IK on the body-frame pose error."""
    alpha = np.array(guess, dtype=float)
    for _ in range(max_iter):
        F, J = chain.forward_and_jacobian(alpha)
        err = mf.se3_log(mf.inverse(F) @ target)
        if np.linalg.norm(err) < tol:
            return alpha, True
        JJt = J @ J.T + damping**2 * np.eye(6)
        alpha = alpha + J.T @ np.linalg.solve(JJt, err)
    err = mf.se3_log(mf.inverse(chain.forward(alpha)) @ target)
    return alpha, bool(np.linalg.norm(err) < 1e-10)


def switch_times(cfg):
    """Switch instants ``n T < duration`` snapped to the encoder grid."""
    out = []
    n = 1
    while n * cfg.step_period < cfg.duration - 1e-12:
        k = round(n * cfg.step_period * cfg.encoder_rate)
        if abs(k / cfg.encoder_rate - n * cfg.step_period) > 1e-9:
            raise InfeasibleConfig("step_period must be a multiple of the encoder period")
        out.append(k / cfg.encoder_rate)
        n += 1
    return np.array(out)


def _rate_ratio(cfg):
    m = cfg.imu_rate / cfg.encoder_rate
    if abs(m - round(m)) > 1e-9 or round(m) < 1:
        raise InfeasibleConfig("imu_rate must be an integer multiple of encoder_rate")
    return int(round(m))


def _discrete_positions(gait, cfg):
    """Base positions at encoder times, integrated with the trapezoid rule on the IMU grid.

    The discrete IMU scheme advances position by the mean of consecutive
    velocities, so using these positions as truth makes noise-free
    preintegration exact rather than accurate to the step size.
    """
    m = _rate_ratio(cfg)
    n_imu = int(round(cfg.duration * cfg.imu_rate)) + 1
    t_imu = np.arange(n_imu) / cfg.imu_rate
    p, v, _ = gait.base(t_imu)
    steps = 0.5 * (v[1:] + v[:-1]) / cfg.imu_rate
    p = p[0] + np.vstack([np.zeros(3), np.cumsum(steps, axis=0)])
    return p[::m]


def _phase(t, T):
    return int(np.floor(t / T + 1e-9))


def _truth_key(cfg):
    return tuple(getattr(cfg, f) for f in _TRUTH_FIELDS)


@functools.lru_cache(maxsize=8)
def _generate_truth_cached(key):
    cfg = ScenarioConfig(**dict(zip(_TRUTH_FIELDS, key)))
    robot = demo_biped()
    gait = _Gait(cfg)
    T = cfg.step_period
    n_samples = int(round(cfg.duration * cfg.encoder_rate)) + 1
    t = np.arange(n_samples) / cfg.encoder_rate
    _, v, R = gait.base(t)
    p = _discrete_positions(gait, cfg)
    X = np.zeros((n_samples, 4, 4))
    X[:, :3, :3] = R
    X[:, :3, 3] = p
    X[:, 3, 3] = 1.0
    frames = tuple(robot.frames)
    left, right = frames
    chains = [robot.chains[left], robot.chains[right]]
    guess = [np.array([0.0, 0.0, -0.4, 0.8, -0.4, 0.0]) for _ in chains]
    alpha = np.zeros((n_samples, robot.n_joints))
    C = np.zeros((n_samples, 4, 4))
    stance = []
    prev = [None, None]
    for k in range(n_samples):
        n = _phase(t[k], T)
        tau = t[k] / T - n
        stance_side = 0 if n % 2 == 0 else 1
        feet = [None, None]
        feet[stance_side] = gait.foothold(n)
        feet[1 - stance_side] = gait.swing(n, max(tau, 0.0))
        Xinv = mf.inverse(X[k])
        for leg in range(2):
            start = guess[leg] if prev[leg] is None else 2.0 * guess[leg] - prev[leg]
            sol, ok = solve_ik(chains[leg], Xinv @ feet[leg], start)
            if not ok:
                raise InfeasibleConfig(f"foot target out of reach at t={t[k]:.3f}")
            if k % 20 == 0:
                sv = np.linalg.svd(chains[leg].analytic_body_jacobian(sol), compute_uv=False)
                if sv[-1] < MIN_SINGULAR_VALUE:
                    raise InfeasibleConfig(f"leg {frames[leg]!r} near singular at t={t[k]:.3f}")
            prev[leg], guess[leg] = guess[leg], sol
            alpha[k, robot.joint_slice(frames[leg])] = sol
        C[k] = feet[stance_side]
        stance.append(frames[stance_side])
    for arr in (t, X, v, C, alpha):
        arr.flags.writeable = False
    return t, X, v, C, tuple(stance), alpha, frames


def generate_truth(cfg):
    t, X, v, C, stance, alpha, frames = _generate_truth_cached(_truth_key(cfg))
    n = len(t)
    return GroundTruth(t=t, X=X, v=v, C=C, stance=list(stance), alpha=alpha,
                       bg=np.zeros((n, 3)), ba=np.zeros((n, 3)),
                       switch_times=switch_times(cfg), frames=frames)


def _discrete_imu(gait, t_imu, dt):
    """Noise-free gyro and accelerometer samples consistent with the discrete scheme."""
    p0, v0, R0 = gait.base(t_imu)
    p1, v1, R1 = gait.base(t_imu + dt)
    w = np.array([mf.so3_log(Ra.T @ Rb) for Ra, Rb in zip(R0, R1)]) / dt
    a_world = (v1 - v0) / dt - GRAVITY
    a = np.einsum("kji,kj->ki", R0, a_world)
    return w, a


def generate(cfg):
    """Simulate ground truth and a noisy :class:`Dataset` for ``cfg``."""
    truth = generate_truth(cfg)
    gait = _Gait(cfg)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    robot = demo_biped()
    frames = truth.frames

    # IMU
    n_imu = int(round(cfg.duration * cfg.imu_rate)) + 1
    t_imu = np.arange(n_imu) / cfg.imu_rate
    dt_imu = 1.0 / cfg.imu_rate
    w, a = _discrete_imu(gait, t_imu, dt_imu)
    bg = np.cumsum(rng.standard_normal((n_imu, 3)), axis=0) * cfg.gyro_walk * np.sqrt(dt_imu)
    ba = np.cumsum(rng.standard_normal((n_imu, 3)), axis=0) * cfg.accel_walk * np.sqrt(dt_imu)
    w_noisy = w + bg + rng.standard_normal((n_imu, 3)) * cfg.gyro_sigma / np.sqrt(dt_imu)
    a_noisy = a + ba + rng.standard_normal((n_imu, 3)) * cfg.accel_sigma / np.sqrt(dt_imu)
    for i in range(3):
        truth.bg[:, i] = np.interp(truth.t, t_imu, bg[:, i])
        truth.ba[:, i] = np.interp(truth.t, t_imu, ba[:, i])

    # encoders and contact bits
    enc_alpha = truth.alpha + rng.standard_normal(truth.alpha.shape) * cfg.sigma_alpha
    contact = np.array([[s == f for f in frames] for s in truth.stance])

    # relative poses between keyframes
    if abs(round(cfg.keyframe_dt * cfg.cam_rate) - cfg.keyframe_dt * cfg.cam_rate) > 1e-9:
        raise InfeasibleConfig("keyframe_dt must be a multiple of the camera period")
    if abs(round(cfg.keyframe_dt * cfg.encoder_rate) - cfg.keyframe_dt * cfg.encoder_rate) > 1e-9:
        raise InfeasibleConfig("keyframe_dt must be a multiple of the encoder period")
    n_kf = int(np.floor(cfg.duration / cfg.keyframe_dt + 1e-9)) + 1
    kf_idx = np.round(np.arange(n_kf) * cfg.keyframe_dt * cfg.encoder_rate).astype(int)
    relpose = []
    sig = np.array([cfg.relpose_sigma_rot] * 3 + [cfg.relpose_sigma_trans] * 3)
    for i in range(n_kf - 1):
        Xi, Xj = truth.X[kf_idx[i]], truth.X[kf_idx[i + 1]]
        L = mf.inverse(Xi) @ Xj @ mf.se3_exp(rng.standard_normal(6) * sig)
        relpose.append((float(truth.t[kf_idx[i + 1]]), i, i + 1, L))

    initial = {
        "t": 0.0, "X": truth.X[0].copy(), "v": truth.v[0].copy(), "C": truth.C[0].copy(),
        "bg": truth.bg[0].copy(), "ba": truth.ba[0].copy(),
    }
    data = Dataset(imu_t=t_imu, imu_w=w_noisy, imu_a=a_noisy, enc_t=truth.t.copy(),
                   enc_alpha=enc_alpha, contact=contact, frames=frames, relpose=relpose,
                   initial=initial)
    if cfg.dropout_windows:
        data = apply_dropout(data, cfg.dropout_windows)
    log.debug("simulated %d imu, %d encoder, %d relpose samples (%d switches)",
              n_imu, len(truth.t), len(relpose), len(truth.switch_times))
    return truth, data


def apply_dropout(data, windows):
    """Drop relative-pose records whose timestamp falls inside any window."""
    kept = [r for r in data.relpose if not any(a <= r[0] <= b for a, b in windows)]
    return replace(data, relpose=kept)
