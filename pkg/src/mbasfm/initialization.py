"""Bootstrap of intrinsics, poses, and depth scales before optimization.

Registration walks the greedy spanning tree: each new frame gets its pose
from a five-point relative pose against its registered parent, its
translation magnitude from the parent's corrected depth, and its depth
scale from the reverse projection onto the parent's known geometry.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares, minimize_scalar
from scipy.spatial.transform import Rotation

from .errors import (
    InsufficientCalibrationPoints,
    NoValidHypothesis,
    ScaleResolutionFailure,
    TwoViewFailure,
)
from .geometry import AffineDepthCorrection, CameraPose, FrameState, back_project
from .ransac2v import estimate_essential_marginalized, sampson_residual
from .fivepoint import select_pose_by_cheirality, triangulate_midpoint
from .distribution import marginalized_score

logger = logging.getLogger(__name__)

# Pixels this close to the optical axis give ill-conditioned focal candidates.
_INCIDENCE_FLOOR = 0.01

# Near-top RANSAC candidates polished per pair; distinct candidates cover the
# distinct local basins of the Sampson error (truth and its planar twin).
_MAX_REFINE_CANDIDATES = 8


@dataclass(frozen=True)
class TwoViewEstimate:
    rotation: np.ndarray  # (3,3), X_dst = R X_src + s t_hat
    translation_dir: np.ndarray  # unit (3,)
    inlier_mask: np.ndarray  # per input correspondence
    scale: float | None = None  # world units per unit baseline; None = unresolved


def calibrate_from_pointmap(pointmap, trials=256, inlier_tol=0.05, seed=0):
    """Recover the single focal from a camera-frame pointmap via RANSAC.

    Per-pixel focal candidates come from the incidence relation
    u - cx = f * x / z (and the y analogue); the principal point is fixed at
    the image center.

    Raises:
        InsufficientCalibrationPoints: fewer than 100 well-conditioned points.
    """
    pointmap = np.asarray(pointmap, dtype=np.float64)
    h, w, _ = pointmap.shape
    cx, cy = w / 2.0, h / 2.0
    us, vs = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    x, y, z = pointmap[..., 0], pointmap[..., 1], pointmap[..., 2]
    valid = np.isfinite(z) & (z > 0) & np.isfinite(x) & np.isfinite(y)
    with np.errstate(divide="ignore", invalid="ignore"):
        ix, iy = x / z, y / z
    candidates = []
    for incidence, coord, center, num in ((ix, us, cx, x), (iy, vs, cy, y)):
        ok = valid & (np.abs(incidence) > _INCIDENCE_FLOOR)
        cand = (coord[ok] - center) * z[ok] / num[ok]
        candidates.append(cand[np.isfinite(cand) & (cand > 0)])
    candidates = np.concatenate(candidates)
    if candidates.size < 100:
        raise InsufficientCalibrationPoints(
            f"only {candidates.size} well-conditioned focal candidates"
        )
    rng = np.random.default_rng(seed)
    best_mask, best_count = None, -1
    for pick in rng.integers(0, candidates.size, size=trials):
        f0 = candidates[pick]
        mask = np.abs(candidates - f0) <= inlier_tol * f0
        count = int(np.count_nonzero(mask))
        if count > best_count:
            best_mask, best_count = mask, count
    return float(np.mean(candidates[best_mask]))


def shared_focal(per_frame_focals):
    """Lower median of the per-frame focal estimates."""
    focals = sorted(per_frame_focals)
    if not focals:
        raise ValueError("no focal estimates to aggregate")
    return float(focals[(len(focals) - 1) // 2])


def _normalize(pixels, intrinsics):
    return (np.asarray(pixels, dtype=np.float64) - intrinsics.principal_point) / intrinsics.focal


def two_view_pose(src_pixels, dst_pixels, k_src, k_dst, ransac_hypotheses=64,
                  inlier_tau=None, seed=0, refine=True) -> TwoViewEstimate:
    """Relative pose (rotation + unit translation direction) from pixel correspondences.

    RANSAC over five-point minimal samples scored by the marginalized inlier
    count on Sampson residuals; cheirality on the inliers selects among the
    four decompositions. `inlier_tau` is in squared normalized-coordinate
    units; the default corresponds to about 4 px at the source focal.

    Raises:
        TwoViewFailure: no hypothesis yields >= 5 cheirality-consistent inliers.
    """
    src_n = _normalize(src_pixels, k_src)
    dst_n = _normalize(dst_pixels, k_dst)
    if len(src_n) < 5:
        raise TwoViewFailure(f"need at least 5 correspondences, got {len(src_n)}")
    if inlier_tau is None:
        inlier_tau = (4.0 / k_src.focal) ** 2
    try:
        candidates = estimate_essential_marginalized(
            src_n, dst_n, hypotheses=ransac_hypotheses, tau_max=inlier_tau, seed=seed,
            keep_ties=True, tie_margin=1.0,
        )
    except NoValidHypothesis as exc:
        raise TwoViewFailure(str(exc)) from exc
    # near-tied candidates are spurious twin solutions on flat-ish scenes:
    # they fit the epipolar constraints almost as well as the truth, and only
    # cheirality separates them. Each near-top candidate is polished in its
    # own basin; the winner has the clearly largest cheirality count, with
    # within-noise count differences resolved by the marginalized score.
    chosen = None
    for result in candidates[:_MAX_REFINE_CANDIDATES]:
        inliers = result.inlier_mask
        if np.count_nonzero(inliers) < 5:
            continue
        selected = select_pose_by_cheirality(result.e_mat, src_n[inliers], dst_n[inliers])
        if selected is None:
            continue
        rotation, translation, positive = selected
        score = result.score
        if refine:
            rotation, translation, positive, inliers, score = _refine_two_view(
                rotation, translation, positive, inliers, score,
                src_n, dst_n, inlier_tau,
            )
        count = int(np.count_nonzero(positive))
        if count < 5:
            continue
        if chosen is None or count > 1.03 * chosen[0] or (
            count >= 0.97 * chosen[0] and score > chosen[1]
        ):
            chosen = (count, score, rotation, translation, positive, inliers)
    if chosen is None:
        raise TwoViewFailure("no candidate has 5 cheirality-consistent inliers")
    _, _, rotation, translation, positive, inliers = chosen
    if refine:
        rotation, translation, positive, inliers = _polish_unclipped(
            rotation, translation, positive, inliers, src_n, dst_n, inlier_tau,
        )
    mask = inliers.copy()
    mask[np.flatnonzero(inliers)] &= positive
    return TwoViewEstimate(rotation=rotation, translation_dir=translation, inlier_mask=mask)


def _polish_unclipped(rotation, translation, positive, inliers, src_n, dst_n,
                      inlier_tau):
    """Sharpen the selected pose by plain Sampson least squares on a
    high-confidence inlier set (a quarter of the threshold).

    The clipped objective used during basin selection is non-smooth at the
    threshold boundary and leaves a cluster of shallow minima within a degree
    of each other; the tight cut keeps outlier contamination negligible, so
    the unclipped fit has a single sharp minimum. Kept only when the
    marginalized score at the full threshold does not drop, so exact
    solutions on noiseless data are never disturbed.
    """
    score_before = marginalized_score(
        sampson_residual(_essential_from_rt(rotation, translation), src_n, dst_n),
        inlier_tau, 100,
    )
    tight = inlier_tau / 4.0
    rot, t = rotation, translation
    for _ in range(2):
        res = sampson_residual(_essential_from_rt(rot, t), src_n, dst_n)
        idx = np.flatnonzero(res < tight)
        if idx.size < 8:
            return rotation, translation, positive, inliers
        src_i, dst_i = src_n[idx], dst_n[idx]
        anchor = np.eye(3)[np.argmin(np.abs(t))]
        u1 = np.cross(t, anchor)
        u1 /= np.linalg.norm(u1)
        u2 = np.cross(t, u1)
        base_rot, base_t = rot, t

        def residuals(params):
            r = Rotation.from_rotvec(params[:3]).as_matrix() @ base_rot
            tv = base_t + params[3] * u1 + params[4] * u2
            tv = tv / np.linalg.norm(tv)
            return np.sqrt(sampson_residual(_essential_from_rt(r, tv), src_i, dst_i))

        sol = least_squares(residuals, np.zeros(5), method="lm")
        rot = Rotation.from_rotvec(sol.x[:3]).as_matrix() @ base_rot
        t = base_t + sol.x[3] * u1 + sol.x[4] * u2
        t = t / np.linalg.norm(t)
    res = sampson_residual(_essential_from_rt(rot, t), src_n, dst_n)
    # a small score drop at the full threshold is expected: the tight fit
    # rearranges marginal points near the boundary. Only a real collapse
    # (or any drop on exact data, where the score is already maximal and
    # the fit is a no-op) rejects the polish.
    if marginalized_score(res, inlier_tau, 100) < 0.95 * score_before:
        return rotation, translation, positive, inliers
    mask = res < inlier_tau
    _, z1, z2 = triangulate_midpoint(rot, t, src_n[mask], dst_n[mask])
    pos = np.isfinite(z1) & np.isfinite(z2) & (z1 > 0) & (z2 > 0)
    if np.count_nonzero(pos) < 5:
        return rotation, translation, positive, inliers
    return rot, t, pos, mask


def _essential_from_rt(rotation, t_dir):
    tx = np.array([
        [0.0, -t_dir[2], t_dir[1]],
        [t_dir[2], 0.0, -t_dir[0]],
        [-t_dir[1], t_dir[0], 0.0],
    ])
    return tx @ rotation


def _refine_two_view(rotation, translation, positive, inliers, score_best,
                     src_n, dst_n, inlier_tau):
    """Polish a decomposed pose by minimizing Sampson error over its inliers.

    Five free parameters: a rotation increment and a tangent move of the unit
    translation. The result is kept only when the marginalized score does not
    drop, so exact minimal solutions (noiseless data) are never disturbed.
    Returns the polished (rotation, translation, positive, inliers, score).
    """
    for _ in range(8):
        idx = np.flatnonzero(inliers)
        if idx.size < 8:
            break
        src_i, dst_i = src_n[idx], dst_n[idx]
        # tangent basis at the current translation direction
        anchor = np.eye(3)[np.argmin(np.abs(translation))]
        u1 = np.cross(translation, anchor)
        u1 /= np.linalg.norm(u1)
        u2 = np.cross(translation, u1)
        base_rot, base_t = rotation, translation

        def residuals(params):
            rot = Rotation.from_rotvec(params[:3]).as_matrix() @ base_rot
            t = base_t + params[3] * u1 + params[4] * u2
            t = t / np.linalg.norm(t)
            res = sampson_residual(_essential_from_rt(rot, t), src_i, dst_i)
            return np.sqrt(np.minimum(res, inlier_tau))

        sol = least_squares(residuals, np.zeros(5), method="lm")
        rot = Rotation.from_rotvec(sol.x[:3]).as_matrix() @ base_rot
        t = base_t + sol.x[3] * u1 + sol.x[4] * u2
        t = t / np.linalg.norm(t)
        res_all = sampson_residual(_essential_from_rt(rot, t), src_n, dst_n)
        score = marginalized_score(res_all, inlier_tau, 100)
        if score < score_best:
            break
        mask_new = res_all < inlier_tau
        _, z1, z2 = triangulate_midpoint(rot, t, src_n[mask_new], dst_n[mask_new])
        positive_new = np.isfinite(z1) & np.isfinite(z2) & (z1 > 0) & (z2 > 0)
        if np.count_nonzero(positive_new) < 5:
            break
        improved = score > score_best or np.count_nonzero(mask_new) > np.count_nonzero(inliers)
        rotation, translation, positive, inliers = rot, t, positive_new, mask_new
        score_best = score
        if not improved:
            break
    return rotation, translation, positive, inliers, score_best


def _optimal_ray_scale(direction, offset, intrinsics, target_pixel):
    """argmin_m || pi(m * direction + offset) - target ||^2 in one camera.

    The projected track is a line in the image, so the stationarity condition
    is linear in m; an ill-conditioned closed form falls back to a bounded
    golden-section search. Returns m or None when no positive-depth minimizer
    exists.
    """
    f = intrinsics.focal
    cx, cy = intrinsics.principal_point
    qx, qy = target_pixel
    a1 = f * offset[0] + (cx - qx) * offset[2]
    a2 = f * offset[1] + (cy - qy) * offset[2]
    b1 = f * direction[0] + (cx - qx) * direction[2]
    b2 = f * direction[1] + (cy - qy) * direction[2]
    c, d = offset[2], direction[2]
    s0 = a1 * a1 + a2 * a2
    s2 = b1 * b1 + b2 * b2
    p0 = a1 * b1 + a2 * b2
    denom = s2 * c - p0 * d
    scale_ref = abs(s2 * c) + abs(p0 * d) + 1e-300
    if abs(denom) > 1e-9 * scale_ref:
        m = (d * s0 - p0 * c) / denom
        if c + m * d > 0 and m > 0:
            return float(m)

    def pixel_error_sq(m):
        z = c + m * d
        if z <= 1e-12:
            return 1e30
        return ((a1 + m * b1) / z) ** 2 + ((a2 + m * b2) / z) ** 2

    res = minimize_scalar(pixel_error_sq, bounds=(1e-4, 1e4), method="bounded",
                          options={"xatol": 1e-10})
    m = float(res.x)
    # a minimizer pinned to a search bound means the track never approaches
    # the target, so the sample carries no scale information
    if not (1.01e-4 < m < 0.99e4):
        return None
    if c + m * d > 0 and pixel_error_sq(m) < 1e29:
        return m
    return None


def resolve_translation_scale(estimate: TwoViewEstimate, src_pixels, src_depths,
                              dst_pixels, k_src, k_dst):
    """Median per-pixel baseline scale making projected depths meet their targets.

    For each sample, the destination-camera point is R X(p, d) + s t_hat; the
    projection traces a line as s varies and the best s is solved per pixel.

    Raises:
        ScaleResolutionFailure: no sample yields a positive-depth minimizer.
    """
    rotation, t_dir = estimate.rotation, estimate.translation_dir
    scales = []
    for pixel, depth, target in zip(src_pixels, src_depths, dst_pixels):
        if not (np.isfinite(depth) and depth > 0):
            continue
        x_src = back_project(pixel, depth, k_src)
        m = _optimal_ray_scale(t_dir, rotation @ x_src, k_dst, target)
        if m is not None:
            scales.append(m)
    if not scales:
        raise ScaleResolutionFailure("no positive-depth scale minimizer found")
    return float(np.median(scales))


def resolve_depth_scale(rel_rotation, rel_translation, src_pixels, src_depths,
                        dst_pixels, k_src, k_dst):
    """Median per-pixel depth multiplier alpha placing src pixels on dst targets.

    The relative pose (X_dst = R X_src + t) is fully scaled here; only the
    source depths are unknown up to a common multiplier.
    """
    scales = []
    for pixel, depth, target in zip(src_pixels, src_depths, dst_pixels):
        if not (np.isfinite(depth) and depth > 0):
            continue
        ray = back_project(pixel, depth, k_src)  # alpha scales this whole ray
        m = _optimal_ray_scale(rel_rotation @ ray, rel_translation, k_dst, target)
        if m is not None:
            scales.append(m)
    if not scales:
        raise ScaleResolutionFailure("no positive-depth alpha minimizer found")
    return float(np.median(scales))


def register_spanning_tree(sequence, data, states, depth_corrections=None,
                           ransac_hypotheses=64, inlier_tau_px=4.0, seed=0):
    """Walk the spanning tree, initializing each frame's pose and depth scale.

    Args:
        sequence: (node, parent) pairs from greedy_spanning_tree; root parent None.
        data: DataMatrix holding per-directed-pair sampled records.
        states: dict frame_id -> FrameState with valid intrinsics.
        depth_corrections: optional known corrections per frame; the root's
            defaults to identity (the gauge).

    Returns:
        (registered_states, failures): updated states for registered frames
        and a dict frame_id -> error message for the rest.
    """
    registered = {}
    failures = {}
    for node, parent in sequence:
        state = states[node]
        if parent is None:
            pose = CameraPose.identity()
            correction = AffineDepthCorrection()  # alpha=1, beta=0: the gauge
            if depth_corrections and node in depth_corrections:
                correction = depth_corrections[node]
            registered[node] = state.with_pose(pose).with_correction(correction)
            continue
        if parent not in registered:
            failures[node] = f"parent {parent} is unregistered"
            continue
        parent_state = registered[parent]
        fwd = data.records.get((parent, node))
        rev = data.records.get((node, parent))
        if fwd is None or rev is None:
            failures[node] = f"no data-matrix records for pair ({parent}, {node})"
            continue
        k_parent, k_node = parent_state.intrinsics, state.intrinsics
        try:
            tau = (inlier_tau_px / k_parent.focal) ** 2
            est = two_view_pose(
                fwd["src_pixels"], fwd["dst_pixels"], k_parent, k_node,
                ransac_hypotheses=ransac_hypotheses, inlier_tau=tau,
                seed=seed + node,
            )
            corrected = parent_state.correction.apply(fwd["src_depths"])
            mask = est.inlier_mask
            baseline = resolve_translation_scale(
                est, fwd["src_pixels"][mask], corrected[mask],
                fwd["dst_pixels"][mask], k_parent, k_node,
            )
        except (TwoViewFailure, ScaleResolutionFailure) as exc:
            failures[node] = str(exc)
            logger.warning("registration of frame %d failed: %s", node, exc)
            continue
        rel = CameraPose.from_rt(est.rotation, baseline * est.translation_dir)
        pose = rel.compose_with(parent_state.pose)

        # reverse direction: depth multiplier for the node's own raw depths
        inv = rel.inverse()
        try:
            alpha = resolve_depth_scale(
                inv.rotation, inv.translation,
                rev["src_pixels"], rev["src_depths"], rev["dst_pixels"],
                k_node, k_parent,
            )
            correction = AffineDepthCorrection.from_alpha_beta(alpha, 0.0)
        except (ScaleResolutionFailure, ValueError) as exc:
            failures[node] = str(exc)
            logger.warning("depth-scale init of frame %d failed: %s", node, exc)
            continue
        registered[node] = state.with_pose(pose).with_correction(correction)
    return registered, failures
