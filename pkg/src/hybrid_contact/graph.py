"""Factor graph over per-keyframe states and a batch Levenberg-Marquardt solver.

Each node carries a base pose ``X``, a velocity ``v``, an optional contact
pose ``C`` and the IMU bias ``b``.  Its tangent vector is laid out as
``(dx: 6, dv: 3, dc: 6, db: 6)``; nodes without a contact pose drop the
``dc`` block.  Poses are updated with the right retraction ``H Exp(d)``,
vectors additively.

Jacobians are central finite differences on the retraction.  Whitened
Jacobians are stacked into a sparse matrix and the damped normal equations
are solved with a sparse LU factorisation.
"""

import logging
import time
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from . import manifold as mf
from .exceptions import (AngleNearPi, BadCovariance, ResidualEvaluationFailed,
                         SingularNormalEquations, UnknownKey)
from .imu import (GRAVITY, bias_random_walk_residual, preintegrate_deltas,
                  preintegrate_deltas_batch, rotation_prefix)

log = logging.getLogger(__name__)

FD_STEP = 1e-6
BLOCK_DIMS = {"x": 6, "v": 3, "c": 6, "b": 6}
FACTOR_KINDS = ("prior", "imu", "fk", "contact", "relpose", "terrain", "bias_walk")


class StateNode:
    """Keyframe state ``(X, v, C, b)``; ``C`` may be None."""

    __slots__ = ("key", "t", "X", "v", "C", "b", "frame")

    def __init__(self, key, t, X, v, b, C=None, frame=None):
        self.key = key
        self.t = float(t)
        self.X = np.asarray(X, dtype=float)
        self.v = np.asarray(v, dtype=float).reshape(3)
        self.b = np.asarray(b, dtype=float).reshape(6)
        self.C = None if C is None else np.asarray(C, dtype=float)
        self.frame = frame

    @property
    def blocks(self):
        return ("x", "v", "c", "b") if self.C is not None else ("x", "v", "b")

    @property
    def dim(self):
        return sum(BLOCK_DIMS[b] for b in self.blocks)

    def block_offset(self, block):
        off = 0
        for name in self.blocks:
            if name == block:
                return off
            off += BLOCK_DIMS[name]
        raise UnknownKey(f"node {self.key} has no {block!r} block")

    def copy(self):
        return StateNode(self.key, self.t, self.X.copy(), self.v.copy(), self.b.copy(),
                         None if self.C is None else self.C.copy(), self.frame)

    def retract_block(self, block, d):
        """New node with one block moved by the tangent increment ``d``."""
        n = StateNode(self.key, self.t, self.X, self.v, self.b, self.C, self.frame)
        if block == "x":
            n.X = self.X @ mf.se3_exp(d)
        elif block == "v":
            n.v = self.v + d
        elif block == "c":
            n.C = self.C @ mf.se3_exp(d)
        else:
            n.b = self.b + d
        return n

    def retract(self, delta):
        n = self
        off = 0
        for name in self.blocks:
            k = BLOCK_DIMS[name]
            n = n.retract_block(name, delta[off:off + k])
            off += k
        return n


def whitening(cov):
    """``W = L^-1`` with ``cov = L L^T``; raises :class:`BadCovariance`."""
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if cov.shape[0] != cov.shape[1] or not np.all(np.isfinite(cov)):
        raise BadCovariance("covariance must be a finite square matrix")
    if np.max(np.abs(cov - cov.T)) > 1e-9 * max(1.0, np.max(np.abs(cov))):
        raise BadCovariance("covariance is not symmetric")
    try:
        L = np.linalg.cholesky(0.5 * (cov + cov.T))
    except np.linalg.LinAlgError:
        raise BadCovariance("covariance is not positive definite") from None
    return scipy.linalg.solve_triangular(L, np.eye(len(cov)), lower=True)


class NodeBatch:
    """Stacked copies of one node's values with a leading batch axis.

    Unperturbed nodes have a batch axis of length one and broadcast against
    the perturbed ones.
    """

    __slots__ = ("X", "v", "C", "b")

    def __init__(self, X, v, C, b):
        self.X, self.v, self.C, self.b = X, v, C, b

    @classmethod
    def of(cls, node):
        return cls(node.X[None], node.v[None], None if node.C is None else node.C[None], node.b[None])

    def perturbed(self, block, D):
        """Batch of ``len(D)`` copies, block ``block`` moved by the rows of ``D``."""
        X, v, C, b = self.X, self.v, self.C, self.b
        if block == "x":
            X = X @ mf.se3_exp_batch(D)
        elif block == "v":
            v = v + D
        elif block == "c":
            C = C @ mf.se3_exp_batch(D)
        else:
            b = b + D
        return NodeBatch(X, v, C, b)


def _bcast(A, m):
    return np.broadcast_to(A, (m,) + A.shape[1:])


class Factor:
    """Residual over the blocks of one or more nodes.

    ``blocks`` lists the ``(key, block)`` pairs the residual depends on.
    Subclasses implement :meth:`batch_residual` on :class:`NodeBatch`
    arguments (in ``keys`` order) and return an ``(m, dim)`` array; the
    finite-difference Jacobian evaluates all perturbations of a block in a
    single call.
    """

    kind = None

    def __init__(self, keys, blocks, covariance):
        self.keys = tuple(keys)
        self.blocks = tuple(blocks)
        self.covariance = np.atleast_2d(np.asarray(covariance, dtype=float))
        self.W = whitening(self.covariance)

    @property
    def dim(self):
        return self.covariance.shape[0]

    def batch_residual(self, batches):
        raise NotImplementedError

    def residual(self, nodes):
        return self.batch_residual([NodeBatch.of(n) for n in nodes])[0]

    def _checked(self, batches, m):
        try:
            R = np.asarray(self.batch_residual(batches), dtype=float)
        except (AngleNearPi, FloatingPointError, np.linalg.LinAlgError) as e:
            raise ResidualEvaluationFailed(f"{self.kind} factor on {self.keys}: {e}") from e
        R = np.broadcast_to(R, (m, self.dim)) if R.ndim == 2 and R.shape[0] == 1 else R
        if R.shape != (m, self.dim) or not np.all(np.isfinite(R)):
            raise ResidualEvaluationFailed(f"{self.kind} factor on {self.keys} gave a bad residual")
        return R

    def evaluate(self, nodes):
        return self._checked([NodeBatch.of(n) for n in nodes], 1)[0]

    def jacobian(self, nodes, h=FD_STEP):
        """Central-difference Jacobian, one column block per entry of ``blocks``."""
        index = {k: i for i, k in enumerate(self.keys)}
        base = [NodeBatch.of(n) for n in nodes]
        out = []
        for key, block in self.blocks:
            pos = index[key]
            n = BLOCK_DIMS[block]
            D = np.vstack([h * np.eye(n), -h * np.eye(n)])
            batches = list(base)
            batches[pos] = base[pos].perturbed(block, D)
            R = self._checked(batches, 2 * n)
            out.append((R[:n] - R[n:]).T / (2.0 * h))
        return out


class PriorFactor(Factor):
    """Prior on any subset of a node's blocks, residual stacked in block order."""

    kind = "prior"

    def __init__(self, key, means, covariance):
        self.means = OrderedDict((k, np.asarray(v, dtype=float)) for k, v in means.items())
        self._inv = {k: mf.inverse(v) for k, v in self.means.items() if k in ("x", "c")}
        super().__init__([key], [(key, b) for b in self.means], covariance)

    def batch_residual(self, batches):
        n = batches[0]
        parts = []
        for block, mean in self.means.items():
            if block == "x":
                parts.append(mf.se3_log_batch(self._inv["x"] @ n.X))
            elif block == "c":
                parts.append(mf.se3_log_batch(self._inv["c"] @ n.C))
            elif block == "v":
                parts.append(n.v - mean)
            else:
                parts.append(n.b - mean)
        m = max(len(p) for p in parts)
        return np.concatenate([_bcast(p, m) for p in parts], axis=1)


class RelPoseFactor(Factor):
    """``Log(L^-1 X_i^-1 X_j)`` for a measured relative base pose ``L``."""

    kind = "relpose"

    def __init__(self, i, j, L, covariance):
        self.L_inv = mf.inverse(L)
        super().__init__([i, j], [(i, "x"), (j, "x")], covariance)

    def batch_residual(self, batches):
        bi, bj = batches
        return mf.se3_log_batch(self.L_inv @ mf.inverse_batch(bi.X) @ bj.X)


class FKFactor(Factor):
    """``Log(C^-1 X H_BC(alpha))`` at one keyframe."""

    kind = "fk"

    def __init__(self, key, H_bc, covariance):
        self.H_bc = np.asarray(H_bc, dtype=float)
        super().__init__([key], [(key, "x"), (key, "c")], covariance)

    def batch_residual(self, batches):
        n = batches[0]
        return mf.se3_log_batch(mf.inverse_batch(n.C) @ n.X @ self.H_bc)


class ContactFactor(Factor):
    """Hybrid preintegrated contact factor ``Log(C_j^-1 C_i dC)``."""

    kind = "contact"

    def __init__(self, i, j, preint):
        self.preint = preint
        super().__init__([i, j], [(i, "c"), (j, "c")], preint.factor_covariance())

    def batch_residual(self, batches):
        bi, bj = batches
        return mf.se3_log_batch(mf.inverse_batch(bj.C) @ bi.C @ self.preint.delta_C)


class TerrainFactor(Factor):
    """Height of the contact pose above a flat map."""

    kind = "terrain"

    def __init__(self, key, sigma_z, height=0.0):
        self.height = float(height)
        super().__init__([key], [(key, "c")], np.array([[sigma_z**2]]))

    def batch_residual(self, batches):
        return batches[0].C[:, 2, 3:4] - self.height


def terrain_factor_residual(C, height=0.0):
    return float(C[2, 3] - height)


def relpose_factor_residual(X_i, X_j, L):
    return mf.se3_log(mf.inverse(L) @ mf.inverse(X_i) @ X_j)


class BiasWalkFactor(Factor):
    kind = "bias_walk"

    def __init__(self, i, j, covariance):
        super().__init__([i, j], [(i, "b"), (j, "b")], covariance)

    def batch_residual(self, batches):
        return bias_random_walk_residual(batches[0].b, batches[1].b)


class ImuFactor(Factor):
    """Preintegrated IMU factor with deltas rebuilt for the current bias of node i.

    The covariance is fixed at construction from ``preint``; the deltas are
    recomputed from the raw samples whenever the bias estimate moves.
    """

    kind = "imu"
    CACHE_SIZE = 32

    def __init__(self, i, j, omegas, accs, dts, preint, gravity=GRAVITY):
        self.omegas = np.asarray(omegas, dtype=float)
        self.accs = np.asarray(accs, dtype=float)
        self.dts = np.asarray(dts, dtype=float)
        self.dt = float(np.sum(self.dts))
        self.gravity = np.asarray(gravity, dtype=float)
        self._cache = OrderedDict()
        self._rot_cache = OrderedDict()
        super().__init__([i, j], [(i, "x"), (i, "v"), (i, "b"), (j, "x"), (j, "v")],
                         preint.sigma + 1e-12 * np.eye(9))

    def deltas(self, b):
        key = b.tobytes()
        hit = self._cache.get(key)
        if hit is None:
            # rotations only depend on the gyro bias
            gkey = b[:3].tobytes()
            Rs = self._rot_cache.get(gkey)
            if Rs is None:
                Rs = rotation_prefix(self.omegas, self.dts, b[:3])
                _remember(self._rot_cache, gkey, Rs, self.CACHE_SIZE)
            hit = preintegrate_deltas(self.omegas, self.accs, self.dts, b, Rs)
            _remember(self._cache, key, hit, self.CACHE_SIZE)
        return hit

    def batch_residual(self, batches):
        bi, bj = batches
        m = max(len(bi.X), len(bi.v), len(bi.b), len(bj.X), len(bj.v))
        if len(bi.b) == 1:
            dR, dv, dp = (d[None] for d in self.deltas(np.ascontiguousarray(bi.b[0])))
        else:
            dR, dv, dp = preintegrate_deltas_batch(self.omegas, self.accs, self.dts, bi.b)
        Ri, pi = bi.X[:, :3, :3], bi.X[:, :3, 3]
        Rj, pj = bj.X[:, :3, :3], bj.X[:, :3, 3]
        RiT = np.swapaxes(Ri, 1, 2)
        dt, g = self.dt, self.gravity
        E = _bcast(np.swapaxes(dR, 1, 2) @ RiT @ Rj, m)
        r_R = mf.so3_log_batch(E)
        r_v = np.einsum("kij,kj->ki", RiT, bj.v - bi.v - g * dt) - dv
        r_p = np.einsum("kij,kj->ki", RiT, pj - pi - bi.v * dt - 0.5 * g * dt**2) - dp
        return np.concatenate([r_R, _bcast(r_v, m), _bcast(r_p, m)], axis=1)


def _remember(cache, key, value, size):
    cache[key] = value
    if len(cache) > size:
        cache.popitem(last=False)


def richardson_ratio(factor, nodes, h=1e-1):
    """``|J(h) - J(h/2)| / |J(h/2) - J(h/4)|`` and the scale of the denominator.

    Central differences have an ``O(h^2)`` error so the ratio tends to 4.
    The base step is large so the truncation error stays well above
    round-off.  For residuals that are affine in the perturbed coordinates
    the differences are pure round-off; the second value lets callers
    detect it.
    """
    J1, J2, J4 = (np.hstack(factor.jacobian(nodes, s)) for s in (h, h / 2, h / 4))
    num = np.linalg.norm(J1 - J2)
    den = np.linalg.norm(J2 - J4)
    scale = max(np.linalg.norm(J2), 1.0)
    return (num / den if den > 0 else np.inf), den / scale


@dataclass
class SolveReport:
    iterations: int = 0
    initial_cost: float = float("nan")
    final_cost: float = float("nan")
    converged: bool = False
    accepted: int = 0
    message: str = ""
    runtime: float = 0.0
    marginals: dict = field(default_factory=dict)

    def summary(self):
        return {
            "iterations": self.iterations, "accepted_steps": self.accepted,
            "initial_cost": self.initial_cost, "final_cost": self.final_cost,
            "converged": self.converged, "message": self.message, "runtime_s": self.runtime,
        }


class FactorGraph:
    def __init__(self):
        self.nodes = OrderedDict()
        self.factors = []

    def add_node(self, node):
        self.nodes[node.key] = node
        return self

    def add_factor(self, factor):
        for key, block in factor.blocks:
            if key not in self.nodes:
                raise UnknownKey(f"factor {factor.kind!r} references missing node {key!r}")
            if block not in self.nodes[key].blocks:
                raise UnknownKey(f"node {key!r} has no {block!r} block for a {factor.kind} factor")
        self.factors.append(factor)
        return self

    def check_anchored(self, values=None):
        """Raise :class:`SingularNormalEquations` unless every node reaches a prior."""
        values = self.nodes if values is None else values
        parent = {k: k for k in values}

        def find(k):
            while parent[k] != k:
                parent[k] = parent[parent[k]]
                k = parent[k]
            return k

        for f in self.factors:
            root = find(f.keys[0])
            for k in f.keys[1:]:
                parent[find(k)] = root
        anchored = {find(f.keys[0]) for f in self.factors if f.kind == "prior"}
        loose = [k for k in values if find(k) not in anchored]
        if loose:
            raise SingularNormalEquations(f"nodes {loose[:5]} are not connected to any prior")

    def factors_of(self, kind):
        return [f for f in self.factors if f.kind == kind]

    def _layout(self, values):
        offsets, off = {}, 0
        for key, node in values.items():
            offsets[key] = off
            off += node.dim
        return offsets, off

    def cost(self, values=None):
        values = self.nodes if values is None else values
        total = 0.0
        for f in self.factors:
            e = f.W @ f.evaluate([values[k] for k in f.keys])
            total += e @ e
        return total

    def linearize(self, values=None, h=FD_STEP):
        """Whitened sparse Jacobian ``A`` and residual ``e`` of the stacked factors.

        The Gauss-Newton normal equations are ``A^T A d = -A^T e``.
        """
        values = self.nodes if values is None else values
        offsets, n = self._layout(values)
        rows, cols, data, res = [], [], [], []
        row = 0
        for f in self.factors:
            nodes = [values[k] for k in f.keys]
            e = f.W @ f.evaluate(nodes)
            for (key, block), J in zip(f.blocks, f.jacobian(nodes, h)):
                WJ = f.W @ J
                c0 = offsets[key] + values[key].block_offset(block)
                r_idx, c_idx = np.indices(WJ.shape)
                rows.append((r_idx + row).ravel())
                cols.append((c_idx + c0).ravel())
                data.append(WJ.ravel())
            res.append(e)
            row += f.dim
        if row == 0:
            return scipy.sparse.csr_matrix((0, n)), np.zeros(0)
        A = scipy.sparse.csr_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
                                    shape=(row, n))
        return A, np.concatenate(res)

    def normal_equations(self, values=None, h=FD_STEP):
        A, e = self.linearize(values, h)
        return (A.T @ A).tocsc(), A.T @ e, float(e @ e)

    def retract(self, values, delta):
        offsets, _ = self._layout(values)
        out = OrderedDict()
        for key, node in values.items():
            o = offsets[key]
            out[key] = node.retract(delta[o:o + node.dim])
        return out

    def solve_lm(self, values=None, lambda0=1e-4, max_iter=100, rel_tol=1e-9, step_tol=1e-10,
                 h=FD_STEP):
        """Levenberg-Marquardt from ``values`` (defaults to the stored nodes).

        Returns ``(solution, report)``; the stored nodes are not modified.
        Damping scales the diagonal of the information matrix.
        """
        start = time.perf_counter()
        values = OrderedDict((k, n.copy()) for k, n in (self.nodes if values is None else values).items())
        report = SolveReport()
        lam = lambda0
        H, g, cost = self.normal_equations(values, h)
        report.initial_cost = cost
        self.check_anchored(values)
        diag = H.diagonal()
        if np.any(diag <= 0):
            raise SingularNormalEquations("some state dimensions are not constrained by any factor")
        for it in range(1, max_iter + 1):
            report.iterations = it
            D = scipy.sparse.diags(lam * diag)
            try:
                delta = _sparse_solve(H + D, -g)
            except SingularNormalEquations:
                lam *= 10.0
                continue
            trial = self.retract(values, delta)
            try:
                new_cost = self.cost(trial)
            except ResidualEvaluationFailed:
                new_cost = np.inf
            step = np.linalg.norm(delta)
            decrease = (cost - new_cost) / cost if cost > 0 else 0.0
            if step < step_tol:
                report.converged = True
                report.message = "step below tolerance"
                break
            if new_cost < cost and decrease >= rel_tol:
                report.accepted += 1
                values = trial
                cost = new_cost
                lam = max(lam / 10.0, 1e-12)
                H, g, cost = self.normal_equations(values, h)
                diag = H.diagonal()
            elif abs(decrease) < rel_tol:
                # no measurable progress left at this linearisation point
                report.converged = True
                report.message = "relative decrease below tolerance"
                break
            else:
                lam *= 10.0
                if lam > 1e16:
                    report.message = "damping exceeded its limit"
                    break
        else:
            report.message = "maximum iterations reached"
        report.final_cost = cost
        report.runtime = time.perf_counter() - start
        log.info("LM: %d iterations, cost %.6g -> %.6g (%s)", report.iterations,
                 report.initial_cost, report.final_cost, report.message)
        return values, report

    def marginal_covariances(self, values, keys):
        """Per-node blocks of the inverse Gauss-Newton information at ``values``."""
        H, _, _ = self.normal_equations(values)
        offsets, n = self._layout(values)
        lu = _factorize(H)
        out = {}
        for key in keys:
            if key not in values:
                raise UnknownKey(f"no node {key!r}")
            o, d = offsets[key], values[key].dim
            E = np.zeros((n, d))
            E[o:o + d] = np.eye(d)
            X = lu.solve(E)
            M = X[o:o + d]
            out[key] = 0.5 * (M + M.T)
        return out

    def marginal_covariance(self, values, key):
        return self.marginal_covariances(values, [key])[key]


def _factorize(H):
    try:
        lu = scipy.sparse.linalg.splu(H.tocsc())
    except RuntimeError as e:
        raise SingularNormalEquations(str(e)) from None
    U = lu.U.diagonal()
    if np.any(U == 0) or not np.all(np.isfinite(U)):
        raise SingularNormalEquations("normal equations are singular")
    return lu


def _sparse_solve(H, b):
    x = _factorize(H).solve(b)
    if not np.all(np.isfinite(x)):
        raise SingularNormalEquations("non-finite solution of the normal equations")
    return x


def pose_logdet(cov):
    """Log-determinant of the 6x6 base-pose block of a node marginal."""
    sign, val = np.linalg.slogdet(cov[:6, :6])
    if sign <= 0:
        raise SingularNormalEquations("base-pose marginal is not positive definite")
    return float(val)
