"""Serial kinematic chains, body Jacobians and the forward-kinematic factor.

A :class:`LeggedRobot` bundles one chain per foot.  Its encoder vector is the
concatenation of the chains' joint vectors in declaration order, so contact
to contact transforms and their Jacobians are functions of the full vector.
"""

from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import manifold as mf
from .exceptions import DimensionMismatch, ParseError, UnknownFramePair

REVOLUTE = "revolute"
PRISMATIC = "prismatic"
JACOBIAN_STEP = 1e-6
COV_REGULARIZATION = 1e-9


@dataclass(frozen=True)
class JointModel:
    name: str
    kind: str
    axis: np.ndarray
    parent_offset: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        if self.kind not in (REVOLUTE, PRISMATIC):
            raise ValueError(f"unknown joint kind {self.kind!r}")
        axis = np.asarray(self.axis, dtype=float)
        n = np.linalg.norm(axis)
        if n == 0:
            raise ValueError(f"joint {self.name!r} has a zero axis")
        axis = axis / n
        object.__setattr__(self, "axis", axis)
        object.__setattr__(self, "parent_offset", np.asarray(self.parent_offset, dtype=float))
        K = mf.skew(axis)
        object.__setattr__(self, "_K", K)
        object.__setattr__(self, "_KK", K @ K)

    @property
    def twist(self):
        """Unit joint twist in the joint frame."""
        z = np.zeros(3)
        if self.kind == REVOLUTE:
            return np.concatenate([self.axis, z])
        return np.concatenate([z, self.axis])

    def motion(self, q):
        M = np.eye(4)
        if self.kind == REVOLUTE:
            M[:3, :3] += np.sin(q) * self._K + (1.0 - np.cos(q)) * self._KK
        else:
            M[:3, 3] = self.axis * q
        return M


@dataclass(frozen=True)
class KinematicChain:
    name: str
    joints: tuple
    end_offset: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        if len(self.joints) == 0:
            raise ValueError(f"chain {self.name!r} has no joints")
        object.__setattr__(self, "joints", tuple(self.joints))
        object.__setattr__(self, "end_offset", np.asarray(self.end_offset, dtype=float))

    @property
    def n_joints(self):
        return len(self.joints)

    def _check(self, alpha):
        alpha = np.asarray(alpha, dtype=float).ravel()
        if alpha.shape[0] != self.n_joints:
            raise DimensionMismatch(
                f"chain {self.name!r} expects {self.n_joints} joint values, got {alpha.shape[0]}")
        return alpha

    def forward(self, alpha):
        """Pose of the end frame in the chain's root (base) frame."""
        alpha = self._check(alpha)
        H = np.eye(4)
        for joint, q in zip(self.joints, alpha):
            H = H @ joint.parent_offset @ joint.motion(q)
        return H @ self.end_offset

    def forward_batch(self, alphas):
        """Vectorised :meth:`forward` over an (n, N) array of joint vectors."""
        alphas = np.atleast_2d(np.asarray(alphas, dtype=float))
        if alphas.shape[1] != self.n_joints:
            raise DimensionMismatch(f"chain {self.name!r} expects {self.n_joints} joint values")
        n = alphas.shape[0]
        H = np.broadcast_to(np.eye(4), (n, 4, 4)).copy()
        for i, joint in enumerate(self.joints):
            M = np.broadcast_to(np.eye(4), (n, 4, 4)).copy()
            if joint.kind == REVOLUTE:
                M[:, :3, :3] = mf.so3_exp_batch(alphas[:, i:i + 1] * joint.axis)
            else:
                M[:, :3, 3] = alphas[:, i:i + 1] * joint.axis
            H = H @ joint.parent_offset @ M
        return H @ self.end_offset

    def forward_and_jacobian(self, alpha):
        """Forward kinematics and the exact body Jacobian in one pass.

        Column ``i`` is ``Ad(F^-1 T_i) xi_i`` with ``T_i`` the pose of joint
        ``i``'s moving frame and ``xi_i`` its unit twist.
        """
        alpha = self._check(alpha)
        prefixes = []
        H = np.eye(4)
        for joint, q in zip(self.joints, alpha):
            H = H @ joint.parent_offset @ joint.motion(q)
            prefixes.append(H)
        F = H @ self.end_offset
        G = mf.inverse(F)[None] @ np.array(prefixes)
        axes = np.array([j.axis for j in self.joints])
        revolute = np.array([j.kind == REVOLUTE for j in self.joints])
        Ra = np.einsum("kij,kj->ki", G[:, :3, :3], axes)
        J = np.zeros((6, self.n_joints))
        J[:3] = (Ra * revolute[:, None]).T
        J[3:] = np.where(revolute[:, None], np.cross(G[:, :3, 3], Ra), Ra).T
        return F, J

    def analytic_body_jacobian(self, alpha):
        """Exact body Jacobian from the joint twists."""
        return self.forward_and_jacobian(alpha)[1]


def numeric_body_jacobian(fk, alpha, h=JACOBIAN_STEP):
    """Central-difference body Jacobian of a pose-valued function ``fk``.

    Column ``i`` is ``(Log(F^-1 F(a + h e_i)) - Log(F^-1 F(a - h e_i))) / 2h``
    so that ``fk(a + d) ~= fk(a) Exp(J d)``.
    """
    alpha = np.asarray(alpha, dtype=float)
    F_inv = mf.inverse(fk(alpha))
    J = np.zeros((6, alpha.size))
    for i in range(alpha.size):
        step = np.zeros(alpha.size)
        step[i] = h
        plus = mf.se3_log(F_inv @ fk(alpha + step))
        minus = mf.se3_log(F_inv @ fk(alpha - step))
        J[:, i] = (plus - minus) / (2.0 * h)
    return J


def body_jacobian(chain, alpha, h=JACOBIAN_STEP):
    """Numerical body Jacobian of a single chain (6 x N)."""
    alpha = chain._check(alpha)
    return numeric_body_jacobian(chain.forward, alpha, h)


def fk_noise_factorization_check(chain, alpha, n_alpha):
    """Norm of ``Log(FK(a)^-1 FK(a - n) Exp(J(a) n))``.

    Zero up to second order in ``n`` when the noise sits on the right of the
    forward kinematics.
    """
    alpha = chain._check(alpha)
    n_alpha = np.asarray(n_alpha, dtype=float)
    J = body_jacobian(chain, alpha)
    E = mf.inverse(chain.forward(alpha)) @ chain.forward(alpha - n_alpha) @ mf.se3_exp(J @ n_alpha)
    return float(np.linalg.norm(mf.se3_log(E)))


@dataclass(frozen=True)
class EncoderReading:
    t: float
    alpha: np.ndarray
    sigma_alpha: np.ndarray

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=float).ravel()
        S = np.asarray(self.sigma_alpha, dtype=float)
        if S.ndim == 0:
            S = float(S) * np.eye(alpha.size)
        if S.shape != (alpha.size, alpha.size):
            raise DimensionMismatch("sigma_alpha must be N x N")
        if np.max(np.abs(S - S.T), initial=0.0) > 1e-10 or np.linalg.eigvalsh(S).min() < -1e-10:
            raise ValueError("sigma_alpha must be symmetric positive semidefinite")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "sigma_alpha", S)


class LeggedRobot:
    """A set of named foot chains sharing one encoder vector."""

    def __init__(self, chains):
        self.chains = dict((c.name, c) for c in chains)
        if not self.chains:
            raise ValueError("robot needs at least one chain")
        self._slices = {}
        start = 0
        for name, chain in self.chains.items():
            self._slices[name] = slice(start, start + chain.n_joints)
            start += chain.n_joints
        self.n_joints = start

    @property
    def frames(self):
        return list(self.chains)

    def _alpha(self, alpha):
        alpha = np.asarray(alpha, dtype=float).ravel()
        if alpha.size != self.n_joints:
            raise DimensionMismatch(f"robot expects {self.n_joints} joint values, got {alpha.size}")
        return alpha

    def _chain(self, frame):
        try:
            return self.chains[frame]
        except KeyError:
            raise UnknownFramePair(f"no chain for contact frame {frame!r}") from None

    def joint_slice(self, frame):
        self._chain(frame)
        return self._slices[frame]

    def fk_base_to_contact(self, frame, alpha):
        alpha = self._alpha(alpha)
        return self._chain(frame).forward(alpha[self._slices[frame]])

    def fk_base_to_contact_batch(self, frame, alphas):
        alphas = np.atleast_2d(np.asarray(alphas, dtype=float))
        return self._chain(frame).forward_batch(alphas[:, self._slices[frame]])

    def fk_contact_to_contact_batch(self, pair, alphas):
        src, dst = pair
        A = self.fk_base_to_contact_batch(src, alphas)
        B = self.fk_base_to_contact_batch(dst, alphas)
        Ainv = np.zeros_like(A)
        RT = np.transpose(A[:, :3, :3], (0, 2, 1))
        Ainv[:, :3, :3] = RT
        Ainv[:, :3, 3] = -np.einsum("kij,kj->ki", RT, A[:, :3, 3])
        Ainv[:, 3, 3] = 1.0
        return Ainv @ B

    def fk_contact_to_contact(self, pair, alpha):
        src, dst = pair
        self._chain(src)
        self._chain(dst)
        if src == dst:
            return np.eye(4)
        return mf.inverse(self.fk_base_to_contact(src, alpha)) @ self.fk_base_to_contact(dst, alpha)

    def jacobian_base_to_contact(self, frame, alpha, h=JACOBIAN_STEP):
        """6 x N body Jacobian over the full encoder vector."""
        alpha = self._alpha(alpha)
        chain = self._chain(frame)
        J = np.zeros((6, self.n_joints))
        J[:, self._slices[frame]] = body_jacobian(chain, alpha[self._slices[frame]], h)
        return J

    def jacobian_contact_to_contact(self, pair, alpha, h=JACOBIAN_STEP):
        alpha = self._alpha(alpha)
        return numeric_body_jacobian(lambda a: self.fk_contact_to_contact(pair, a), alpha, h)

    def analytic_jacobian_base_to_contact(self, frame, alpha):
        alpha = self._alpha(alpha)
        J = np.zeros((6, self.n_joints))
        sl = self._slices[frame]
        J[:, sl] = self._chain(frame).analytic_body_jacobian(alpha[sl])
        return J


def fk_factor_residual(X, C, alpha_tilde, frame, robot):
    """``Log(C^-1 X H_BC(alpha))``; zero when ``C = X H_BC``."""
    alpha = alpha_tilde.alpha if isinstance(alpha_tilde, EncoderReading) else alpha_tilde
    H = robot.fk_base_to_contact(frame, alpha)
    return mf.se3_log(mf.inverse(C) @ X @ H)


def fk_factor_covariance(alpha_tilde, frame, robot):
    """``J Sigma_alpha J^T`` plus a small diagonal regulariser."""
    J = robot.jacobian_base_to_contact(frame, alpha_tilde.alpha)
    S = J @ alpha_tilde.sigma_alpha @ J.T
    S = 0.5 * (S + S.T)
    return S + COV_REGULARIZATION * np.eye(6)


# robot description files ---------------------------------------------------

def _parse_vec(text, lineno):
    try:
        values = [float(x) for x in text.split(",")]
    except ValueError:
        raise ParseError(f"bad vector {text!r}", lineno) from None
    if len(values) != 3:
        raise ParseError(f"expected 3 comma separated numbers, got {text!r}", lineno)
    return np.array(values)


def _parse_kv(tokens, lineno):
    out = {}
    for tok in tokens:
        if "=" not in tok:
            raise ParseError(f"expected key=value, got {tok!r}", lineno)
        k, v = tok.split("=", 1)
        out[k] = _parse_vec(v, lineno)
    return out


def _offset(kv, prefix):
    xyz = kv.get(f"{prefix}xyz", np.zeros(3))
    rpy = kv.get(f"{prefix}rpy", np.zeros(3))
    return mf.make_pose(mf.rpy_to_rotation(*rpy), xyz)


def parse_robot_description(text):
    """Parse the plain-text robot description format into a :class:`LeggedRobot`.

    ::

        chain left
        joint hip_roll revolute axis=1,0,0 offset_xyz=0,0.1,0 offset_rpy=0,0,0
        ...
        end_offset_xyz=0,0,-0.05 end_offset_rpy=0,0,0
    """
    chains = []
    name, joints = None, []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        head = tokens[0]
        if head == "chain":
            if name is not None:
                raise ParseError(f"chain {name!r} missing end_offset line", lineno)
            if len(tokens) != 2:
                raise ParseError("expected 'chain <name>'", lineno)
            name, joints = tokens[1], []
        elif head == "joint":
            if name is None:
                raise ParseError("joint outside of a chain block", lineno)
            if len(tokens) < 3:
                raise ParseError("expected 'joint <name> <kind> ...'", lineno)
            kv = _parse_kv(tokens[3:], lineno)
            if "axis" not in kv:
                raise ParseError("joint needs axis=", lineno)
            unknown = set(kv) - {"axis", "offset_xyz", "offset_rpy"}
            if unknown:
                raise ParseError(f"unknown joint keys {sorted(unknown)}", lineno)
            try:
                joints.append(JointModel(tokens[1], tokens[2], kv["axis"], _offset(kv, "offset_")))
            except ValueError as e:
                raise ParseError(str(e), lineno) from None
        elif head.startswith("end_offset"):
            if name is None or not joints:
                raise ParseError("end_offset without a chain of joints", lineno)
            kv = _parse_kv(tokens, lineno)
            unknown = set(kv) - {"end_offset_xyz", "end_offset_rpy"}
            if unknown:
                raise ParseError(f"unknown end offset keys {sorted(unknown)}", lineno)
            chains.append(KinematicChain(name, tuple(joints), _offset(kv, "end_offset_")))
            name, joints = None, []
        else:
            raise ParseError(f"unrecognised line {line!r}", lineno)
    if name is not None:
        raise ParseError(f"chain {name!r} missing end_offset line", None)
    return LeggedRobot(chains)


def load_robot(path):
    with open(path, encoding="utf-8") as f:
        return parse_robot_description(f.read())


def demo_biped():
    """The bundled six-joint-per-leg biped used by the simulator."""
    text = resources.files("hybrid_contact").joinpath("data/biped.robot").read_text("utf-8")
    return parse_robot_description(text)
