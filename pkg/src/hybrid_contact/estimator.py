"""Keyframe smoothing of a recorded dataset.

:func:`build_graph` turns sensor streams into a factor graph for one of the
factor sets ``vic`` (relative pose + IMU + contact), ``ic``, ``vi`` or ``i``.
Contact always brings forward-kinematic factors with it.
:class:`HybridContactSmoother` wraps building, solving and marginal recovery
behind a scikit-learn style ``fit`` / ``predict`` interface.
"""

import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial.transform import Rotation, Slerp
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import manifold as mf
from .contact import ContactNoiseModel, ContactTracker, PreintegratedContact, SwitchEvent
from .exceptions import ConfigError, SingularNormalEquations
from .graph import (BiasWalkFactor, ContactFactor, FactorGraph, FKFactor, ImuFactor,
                    PriorFactor, RelPoseFactor, StateNode, TerrainFactor, pose_logdet)
from .imu import GRAVITY, ImuBias, ImuNoise, preintegrate
from .kinematics import EncoderReading, demo_biped, fk_factor_covariance

log = logging.getLogger(__name__)

FACTOR_SETS = {
    "vic": {"relpose", "imu", "contact"},
    "ic": {"imu", "contact"},
    "vi": {"relpose", "imu"},
    "i": {"imu"},
}
TIME_TOL = 1e-6


@dataclass(frozen=True)
class EstimatorNoise:
    """Noise assumptions of the estimator (standard deviations)."""

    sigma_alpha: float = 2e-3
    gyro_sigma: float = 1e-3
    accel_sigma: float = 1e-2
    gyro_walk: float = 1e-5
    accel_walk: float = 1e-5
    relpose_sigma_rot: float = 1e-4
    relpose_sigma_trans: float = 5e-3
    contact_sigma_rot: float = 1e-3
    contact_sigma_trans: float = 1e-3
    terrain_sigma_z: float = 2e-3
    prior_sigma_pose: float = 1e-4
    prior_sigma_vel: float = 1e-2
    prior_sigma_gyro_bias: float = 1e-3
    prior_sigma_accel_bias: float = 1e-2

    def imu(self):
        return ImuNoise(self.gyro_sigma, self.accel_sigma, self.gyro_walk, self.accel_walk)

    def contact(self):
        return ContactNoiseModel.isotropic(self.contact_sigma_rot, self.contact_sigma_trans)


@dataclass
class KeyframeGraph:
    graph: FactorGraph
    times: np.ndarray
    frames: list
    factors: str


def _nearest(times, t):
    k = int(np.clip(np.searchsorted(times, t), 1, len(times) - 1))
    k = k if abs(times[k] - t) < abs(times[k - 1] - t) else k - 1
    return k


def keyframe_times(data, keyframe_dt):
    if not keyframe_dt > 0:
        raise ConfigError("keyframe_dt must be positive")
    t0 = data.initial["t"] if data.initial is not None else data.imu_t[0]
    t_end = min(data.imu_t[-1], data.enc_t[-1]) if len(data.enc_t) else data.imu_t[-1]
    n = int(np.floor((t_end - t0) / keyframe_dt + 1e-9)) + 1
    return t0 + np.arange(n) * keyframe_dt


def _imu_predict(X, v, dR, dv, dp, dt):
    R, p = X[:3, :3], X[:3, 3]
    Xn = mf.make_pose(mf.project_to_so3(R @ dR), p + v * dt + 0.5 * GRAVITY * dt**2 + R @ dp)
    return Xn, v + GRAVITY * dt + R @ dv


def build_graph(data, factors="vic", keyframe_dt=0.25, terrain=False, noise=None, robot=None):
    """Factor graph plus initial values for ``data``.

    Keyframes sit on a fixed cadence from the initial-state record.  The
    initial values chain relative poses where present, else leg odometry,
    else IMU prediction.
    """
    if factors not in FACTOR_SETS:
        raise ConfigError(f"unknown factor set {factors!r}; expected one of {sorted(FACTOR_SETS)}")
    if data.initial is None:
        raise ConfigError("dataset has no initial state record to anchor the graph")
    active = FACTOR_SETS[factors]
    use_contact = "contact" in active
    if terrain and not use_contact:
        raise ConfigError("terrain factors need the contact factor set")
    noise = noise or EstimatorNoise()
    robot = robot or demo_biped()
    imu_noise = noise.imu()
    t_kf = keyframe_times(data, keyframe_dt)
    n_kf = len(t_kf)
    imu_idx = [_nearest(data.imu_t, t) for t in t_kf]
    if np.max(np.abs(data.imu_t[imu_idx] - t_kf)) > TIME_TOL:
        raise ConfigError("keyframe times do not fall on IMU samples")

    # contact frame tracking over the encoder stream
    frames_at_kf, enc_idx, readings, switch_at = [None] * n_kf, [], {}, {}
    if use_contact:
        enc_idx = [_nearest(data.enc_t, t) for t in t_kf]
        if np.max(np.abs(data.enc_t[enc_idx] - t_kf)) > TIME_TOL:
            raise ConfigError("keyframe times do not fall on encoder samples")
        tracker = ContactTracker(data.frames)
        tracked = []
        for k in range(len(data.enc_t)):
            sw = tracker.update(dict(zip(data.frames, data.contact[k])))
            if sw is not None:
                switch_at[k] = sw
            tracked.append(tracker.current)
        frames_at_kf = [tracked[k] for k in enc_idx]
        if any(f is None for f in frames_at_kf):
            raise ConfigError("no foot in contact at a keyframe")
        var = noise.sigma_alpha**2

        def reading(k):
            if k not in readings:
                readings[k] = EncoderReading(data.enc_t[k], data.enc_alpha[k], var)
            return readings[k]

    init = data.initial
    b0 = np.concatenate([init["bg"], init["ba"]])
    graph = FactorGraph()
    X, v = init["X"], init["v"]
    relpose_by_j = {}
    if "relpose" in active:
        for t, i, j, L in data.relpose:
            if not (0 <= i < j < n_kf) or abs(t_kf[j] - t) > TIME_TOL:
                raise ConfigError(f"relative pose ({i}, {j}) at t={t} does not match the keyframes")
            relpose_by_j.setdefault(j, []).append((i, L))

    imu_factors = []
    contact_preints = []
    for n in range(n_kf):
        if n > 0:
            a, b = imu_idx[n - 1], imu_idx[n]
            dts = np.diff(data.imu_t[a:b + 1])
            pre = preintegrate(data.imu_w[a:b], data.imu_a[a:b], dts, ImuBias.from_vector(b0),
                               imu_noise, t_kf[n - 1])
            imu_factors.append((n - 1, n, data.imu_w[a:b], data.imu_a[a:b], dts, pre))
            prev = graph.nodes[n - 1]
            Xp, v = _imu_predict(prev.X, prev.v, pre.delta_R, pre.delta_v, pre.delta_p, pre.dt_total)
            X = Xp
            if use_contact:
                pc = PreintegratedContact(n - 1)
                cnoise = noise.contact()
                for k in range(enc_idx[n - 1], enc_idx[n]):
                    pc.stance_step(data.enc_t[k + 1] - data.enc_t[k], cnoise)
                    if k + 1 in switch_at:
                        src, dst = switch_at[k + 1]
                        pc.switch(SwitchEvent(data.enc_t[k + 1], src, dst, reading(k + 1)), robot)
                contact_preints.append(pc)
                C_odo = prev.C @ pc.delta_C
                H = robot.fk_base_to_contact(frames_at_kf[n], data.enc_alpha[enc_idx[n]])
                X = C_odo @ mf.inverse(H)
            if n in relpose_by_j:
                i, L = relpose_by_j[n][0]
                X = graph.nodes[i].X @ L
        C = None
        if use_contact:
            C = X @ robot.fk_base_to_contact(frames_at_kf[n], data.enc_alpha[enc_idx[n]])
        if n == 0:
            C = init["C"] if use_contact else None
        graph.add_node(StateNode(n, t_kf[n], X, v, b0, C, frames_at_kf[n]))

    # factors
    means = OrderedDict([("x", init["X"]), ("v", init["v"])])
    sig = [noise.prior_sigma_pose] * 6 + [noise.prior_sigma_vel] * 3
    if use_contact:
        means["c"] = init["C"]
        sig += [noise.prior_sigma_pose] * 6
    means["b"] = b0
    sig += [noise.prior_sigma_gyro_bias] * 3 + [noise.prior_sigma_accel_bias] * 3
    graph.add_factor(PriorFactor(0, means, np.diag(np.square(sig))))

    for i, j, w, a, dts, pre in imu_factors:
        graph.add_factor(ImuFactor(i, j, w, a, dts, pre))
        graph.add_factor(BiasWalkFactor(i, j, imu_noise.bias_walk_covariance(t_kf[j] - t_kf[i])))
    if "relpose" in active:
        cov = np.diag([noise.relpose_sigma_rot**2] * 3 + [noise.relpose_sigma_trans**2] * 3)
        for j in sorted(relpose_by_j):
            for i, L in relpose_by_j[j]:
                graph.add_factor(RelPoseFactor(i, j, L, cov))
    if use_contact:
        for n in range(n_kf):
            r = reading(enc_idx[n])
            H = robot.fk_base_to_contact(frames_at_kf[n], r.alpha)
            graph.add_factor(FKFactor(n, H, fk_factor_covariance(r, frames_at_kf[n], robot)))
            if terrain:
                graph.add_factor(TerrainFactor(n, noise.terrain_sigma_z))
        for n, pc in enumerate(contact_preints):
            graph.add_factor(ContactFactor(n, n + 1, pc))
    log.info("graph %s: %d keyframes, %d factors", factors, n_kf, len(graph.factors))
    return KeyframeGraph(graph, t_kf, frames_at_kf, factors)


@dataclass
class Trajectory:
    t: np.ndarray
    X: np.ndarray
    v: np.ndarray
    b: np.ndarray
    C: np.ndarray = None
    pose_logdet: np.ndarray = None

    def table(self):
        """Rows ``t, qw, qx, qy, qz, px, py, pz, vx, vy, vz, bg(3), ba(3)``."""
        rows = []
        for t, X, v, b in zip(self.t, self.X, self.v, self.b):
            q, p = mf.pose_to_qp(X)
            rows.append(np.concatenate([[t], q, p, v, b]))
        return np.array(rows)


TRAJECTORY_HEADER = ["t", "qw", "qx", "qy", "qz", "px", "py", "pz", "vx", "vy", "vz",
                     "bgx", "bgy", "bgz", "bax", "bay", "baz"]


def trajectory_from_values(times, values):
    nodes = list(values.values())
    C = None
    if all(n.C is not None for n in nodes):
        C = np.array([n.C for n in nodes])
    return Trajectory(t=np.asarray(times, dtype=float), X=np.array([n.X for n in nodes]),
                      v=np.array([n.v for n in nodes]), b=np.array([n.b for n in nodes]), C=C)


class HybridContactSmoother(BaseEstimator):
    """Batch smoother over keyframes for a chosen factor set.

    ``fit`` takes a :class:`~hybrid_contact.sim.Dataset`; ``predict`` maps
    query times to base poses as ``(qw, qx, qy, qz, px, py, pz)`` rows by
    interpolating between keyframes.
    """

    def __init__(self, factors="vic", keyframe_dt=0.25, terrain=False, compute_marginals=True,
                 max_iter=100, noise=None):
        self.factors = factors
        self.keyframe_dt = keyframe_dt
        self.terrain = terrain
        self.compute_marginals = compute_marginals
        self.max_iter = max_iter
        self.noise = noise

    def fit(self, data, y=None):
        kg = build_graph(data, self.factors, self.keyframe_dt, self.terrain, self.noise)
        values, report = kg.graph.solve_lm(max_iter=self.max_iter)
        self.graph_ = kg
        self.values_ = values
        self.report_ = report
        self.trajectory_ = trajectory_from_values(kg.times, values)
        if self.compute_marginals:
            try:
                marg = kg.graph.marginal_covariances(values, list(values))
                self.marginals_ = marg
                self.trajectory_.pose_logdet = np.array([pose_logdet(marg[k]) for k in values])
            except SingularNormalEquations as e:
                report.message += f"; marginals unavailable: {e}"
                raise
        return self

    def predict(self, times):
        check_is_fitted(self, "trajectory_")
        times = check_array(np.atleast_1d(times).reshape(-1, 1), ensure_min_samples=1).ravel()
        tr = self.trajectory_
        tq = np.clip(times, tr.t[0], tr.t[-1])
        rots = Rotation.from_matrix(tr.X[:, :3, :3])
        R = Slerp(tr.t, rots)(tq)
        p = np.column_stack([np.interp(tq, tr.t, tr.X[:, i, 3]) for i in range(3)])
        xyzw = R.as_quat()
        q = np.column_stack([xyzw[:, 3], xyzw[:, :3]])
        q[q[:, 0] < 0] *= -1.0
        return np.hstack([q, p])

    def score(self, data, truth):
        """Negative final-position drift against ``truth`` (higher is better)."""
        check_is_fitted(self, "trajectory_")
        k = _nearest(truth.t, self.trajectory_.t[-1])
        return -float(np.linalg.norm(self.trajectory_.X[-1, :3, 3] - truth.X[k, :3, 3]))


def noise_from_config(cfg):
    """Estimator noise matching a simulator configuration."""
    kw = {f: getattr(cfg, f) for f in asdict(EstimatorNoise()) if hasattr(cfg, f)}
    return EstimatorNoise(**kw)
