"""Pose-accuracy metrics: RRA/RTA, AUC over pair errors, normalized ATE,
and the absolute relocalization accuracy criterion."""

from __future__ import annotations

import itertools
import logging

import numpy as np

from .errors import InsufficientFrames

logger = logging.getLogger(__name__)


def rotation_angle_deg(r_a, r_b):
    """Geodesic angle in degrees between two rotation matrices.

    Uses ||R_a - R_b||_F = 2 sqrt(2) sin(theta / 2), which stays accurate
    near zero where the arccos-of-trace form loses half the digits.
    """
    diff = np.linalg.norm(np.asarray(r_a) - np.asarray(r_b))
    return float(np.degrees(2.0 * np.arcsin(np.clip(diff / (2.0 * np.sqrt(2.0)), 0.0, 1.0))))


def _direction_angle_deg(v_a, v_b):
    na, nb = np.linalg.norm(v_a), np.linalg.norm(v_b)
    if na < 1e-12 and nb < 1e-12:
        return 0.0
    if na < 1e-12 or nb < 1e-12:
        return 180.0
    # atan2 of the parallelogram area and the dot product is accurate at
    # both ends of the range, unlike arccos of the normalized dot product
    cross = np.linalg.norm(np.cross(v_a, v_b))
    return float(np.degrees(np.arctan2(cross, np.dot(v_a, v_b))))


def _relative(pose_i, pose_j):
    """Relative motion i -> j: X_j = R_rel X_i + t_rel."""
    r_i, t_i = pose_i.rotation, pose_i.translation
    r_j, t_j = pose_j.rotation, pose_j.translation
    r_rel = r_j @ r_i.T
    return r_rel, t_j - r_rel @ t_i


def pairwise_pose_errors(est_states, gt_states):
    """(rotation, translation-direction) angle errors in degrees for every
    frame pair present in both state dicts, keyed (i, j) with i < j."""
    common = sorted(set(est_states) & set(gt_states))
    if len(common) < 2:
        raise InsufficientFrames(f"need >= 2 common frames, got {len(common)}")
    errors = {}
    for i, j in itertools.combinations(common, 2):
        re_est, te_est = _relative(est_states[i].pose, est_states[j].pose)
        re_gt, te_gt = _relative(gt_states[i].pose, gt_states[j].pose)
        errors[(i, j)] = (
            rotation_angle_deg(re_gt, re_est),
            _direction_angle_deg(te_gt, te_est),
        )
    return errors


def rra_rta(est_states, gt_states, tau_deg):
    """Relative rotation / translation accuracy at tau_deg, as percentages."""
    errors = pairwise_pose_errors(est_states, gt_states)
    rot = np.array([e[0] for e in errors.values()])
    trans = np.array([e[1] for e in errors.values()])
    return (
        100.0 * float(np.mean(rot < tau_deg)),
        100.0 * float(np.mean(trans < tau_deg)),
    )


def auc_pose(pair_errors_deg, tau_deg):
    """Area under the empirical error CDF up to tau, normalized by tau."""
    errors = np.sort(np.asarray(pair_errors_deg, dtype=np.float64))
    if errors.size == 0:
        raise ValueError("empty error sequence")
    n = errors.size
    # integrate the step CDF over [0, tau]: between consecutive error values
    # the CDF is constant at k/n
    points = np.concatenate([errors[errors < tau_deg], [tau_deg]])
    area = 0.0
    for k in range(len(points) - 1):
        area += ((k + 1) / n) * (points[k + 1] - points[k])
    return float(area / tau_deg)


def umeyama(src, dst):
    """Similarity (s, R, t) minimizing || s R src + t - dst ||^2.

    Returns the least-squares alignment mapping `src` points onto `dst`.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    src_c, dst_c = src - mu_s, dst - mu_d
    cov = dst_c.T @ src_c / len(src)
    u, d, vt = np.linalg.svd(cov)
    sign = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sign[-1] = -1.0
    rot = u @ np.diag(sign) @ vt
    var_s = np.mean(np.sum(src_c**2, axis=1))
    scale = float(np.sum(d * sign) / var_s) if var_s > 0 else 1.0
    t = mu_d - scale * rot @ mu_s
    return scale, rot, t


def ate(est_centers, gt_centers):
    """RMSE of similarity-aligned camera centers over the ground-truth
    trajectory diameter. Collinear trajectories are flagged but still scored."""
    est = np.asarray(est_centers, dtype=np.float64)
    gt = np.asarray(gt_centers, dtype=np.float64)
    if len(est) < 3 or len(est) != len(gt):
        raise InsufficientFrames(f"need >= 3 matched centers, got {len(est)}/{len(gt)}")
    centered = gt - gt.mean(axis=0)
    svals = np.linalg.svd(centered, compute_uv=False)
    if svals[1] < 1e-9 * max(svals[0], 1e-300):
        logger.warning("ground-truth centers are (near-)collinear; ATE alignment is ill-posed")
    scale, rot, t = umeyama(est, gt)
    aligned = est @ (scale * rot).T + t
    rmse = float(np.sqrt(np.mean(np.sum((aligned - gt) ** 2, axis=1))))
    diffs = gt[:, None, :] - gt[None, :, :]
    diameter = float(np.sqrt((diffs**2).sum(axis=2).max()))
    if diameter <= 0:
        raise InsufficientFrames("ground-truth trajectory has zero diameter")
    return rmse / diameter


def reloc_accuracy(est_states, gt_states, trans_tol, rot_tol_deg):
    """Percentage of queries whose absolute pose is inside both tolerances.

    No alignment is applied: the map fixes the gauge, so errors are measured
    directly in map coordinates.
    """
    common = sorted(set(est_states) & set(gt_states))
    if not common:
        return 0.0
    hits = 0
    for fid in common:
        est, gt = est_states[fid], gt_states[fid]
        rot_err = rotation_angle_deg(gt.pose.rotation, est.pose.rotation)
        trans_err = float(np.linalg.norm(est.pose.camera_center() - gt.pose.camera_center()))
        if rot_err < rot_tol_deg and trans_err < trans_tol:
            hits += 1
    return 100.0 * hits / len(common)
