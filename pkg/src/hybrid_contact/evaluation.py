"""Trajectory error metrics: ATE after first-pose alignment and relative position error."""

from dataclasses import dataclass

import numpy as np

from . import manifold as mf
from .exceptions import TimestampMismatch

RPE_HORIZON = 1.0
MAX_UNMATCHED = 0.1


def match_times(t_est, t_true, tol):
    """Index into ``t_true`` for every estimate time, -1 when nothing is within ``tol``."""
    t_true = np.asarray(t_true, dtype=float)
    idx = np.clip(np.searchsorted(t_true, t_est), 1, len(t_true) - 1)
    left = idx - 1
    pick = np.where(np.abs(t_true[idx] - t_est) < np.abs(t_true[left] - t_est), idx, left)
    pick = np.where(np.abs(t_true[pick] - t_est) <= tol, pick, -1)
    return pick


def align_first_pose(X_est, X_true):
    """Rigidly move the estimate so its first pose coincides with the truth."""
    G = X_true[0] @ mf.inverse(X_est[0])
    return G[None] @ X_est


def absolute_errors(X_est, X_true):
    """Per-pose position and rotation error after first-pose alignment."""
    A = align_first_pose(X_est, X_true)
    pos = np.linalg.norm(A[:, :3, 3] - X_true[:, :3, 3], axis=1)
    rot = np.array([np.linalg.norm(mf.so3_log(a[:3, :3].T @ b[:3, :3])) for a, b in zip(A, X_true)])
    return pos, rot


def relative_position_errors(t, X_est, X_true, horizon=RPE_HORIZON):
    """Error in the displacement travelled over ``horizon`` seconds.

    Displacements are compared in the world frame after first-pose
    alignment, so heading drift accumulated before ``t_k`` shows up as a
    misdirected displacement.
    """
    t = np.asarray(t, dtype=float)
    p_est = align_first_pose(X_est, X_true)[:, :3, 3]
    p_true = np.asarray(X_true)[:, :3, 3]
    out = []
    for k in range(len(t)):
        m = int(np.searchsorted(t, t[k] + horizon - 1e-9))
        if m >= len(t) or abs(t[m] - t[k] - horizon) > 1e-6:
            continue
        out.append(np.linalg.norm((p_est[m] - p_est[k]) - (p_true[m] - p_true[k])))
    return np.array(out)


def cdf_table(errors):
    """Rows ``(error, cumulative fraction)`` sorted by error."""
    e = np.sort(np.asarray(errors, dtype=float))
    if e.size == 0:
        return np.zeros((0, 2))
    return np.column_stack([e, np.arange(1, e.size + 1) / e.size])


def cdf_at(errors, x):
    """Empirical CDF of ``errors`` evaluated at ``x``."""
    e = np.asarray(errors, dtype=float)
    return float(np.mean(e <= x)) if e.size else 0.0


@dataclass
class Evaluation:
    t: np.ndarray
    ate_position: np.ndarray
    ate_rotation: np.ndarray
    rpe: np.ndarray

    def summary(self):
        ate = self.ate_position
        rpe = self.rpe if self.rpe.size else np.array([np.nan])
        return {
            "n_poses": int(len(self.t)),
            "ate_rmse": float(np.sqrt(np.mean(ate**2))),
            "ate_max": float(np.max(ate)),
            "ate_rot_max": float(np.max(self.ate_rotation)),
            "final_drift": float(ate[-1]),
            "rpe_horizon": RPE_HORIZON,
            "rpe_count": int(self.rpe.size),
            "rpe_median": float(np.median(rpe)),
            "rpe_mean": float(np.mean(rpe)),
            "rpe_max": float(np.max(rpe)),
        }


def evaluate(t_est, X_est, t_true, X_true, tol=None, horizon=RPE_HORIZON):
    """Match estimate poses to truth and compute all error metrics.

    ``tol`` defaults to half the median estimate spacing.  More than 10 %
    unmatched estimate times raises :class:`TimestampMismatch`.
    """
    t_est = np.asarray(t_est, dtype=float)
    if len(t_est) == 0:
        raise TimestampMismatch("estimate is empty")
    if tol is None:
        tol = 0.5 * float(np.median(np.diff(t_est))) if len(t_est) > 1 else 1e-6
    idx = match_times(t_est, t_true, tol)
    ok = idx >= 0
    if np.mean(~ok) > MAX_UNMATCHED:
        raise TimestampMismatch(f"{np.sum(~ok)} of {len(ok)} estimate times have no truth within {tol} s")
    Xe = np.asarray(X_est)[ok]
    Xt = np.asarray(X_true)[idx[ok]]
    pos, rot = absolute_errors(Xe, Xt)
    rpe = relative_position_errors(t_est[ok], Xe, Xt, horizon)
    return Evaluation(t=t_est[ok], ate_position=pos, ate_rotation=rot, rpe=rpe)
