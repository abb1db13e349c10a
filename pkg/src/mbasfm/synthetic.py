"""Analytic ground-truth scenes: camera trajectories over a known surface,
rendered depth maps, cross-projected correspondences, and an oracle that
scores estimated states against the truth."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigInfeasible
from .evaluation import rotation_angle_deg, umeyama
from .geometry import (
    AffineDepthCorrection,
    CameraIntrinsics,
    CameraPose,
    FrameState,
    Z_FLOOR,
)
from .io_formats import (
    ManifestFrame,
    SceneManifest,
    save_manifest,
    write_correspondences,
    write_depth,
    write_pointmap,
)

TRAJECTORIES = ("orbit", "line", "random_inside_sphere")
SURFACES = ("plane", "sinusoid_heightfield")
OUTLIER_MODES = ("uniform_pixel", "wrong_frame")

# Heightfield z = AMP * sin(FREQ x) * cos(FREQ y). The max surface slope
# (AMP * FREQ) stays below the shallowest ray's tangent for the standard
# trajectories, so each ray crosses the surface exactly once and nothing is
# occluded. The amplitude is deliberately large relative to the viewing
# distance: a flat scene makes two-view geometry degenerate.
_HF_AMP = 0.8
_HF_FREQ = 0.45
_MIN_PAIR_SAMPLES = 20


def _pair_in_window(cfg, i, j):
    """Whether the generator emits correspondences for the ordered pair (i, j).

    With no pair_window every ordered pair is produced. Orbit trajectories
    measure distance around the ring; the others along the index sequence.
    """
    if cfg.pair_window is None:
        return True
    d = abs(i - j)
    if cfg.trajectory == "orbit":
        d = min(d, cfg.frame_count - d)
    return d <= cfg.pair_window


@dataclass(frozen=True)
class SyntheticConfig:
    frame_count: int = 20
    image_size: tuple = (128, 96)
    focal_true: float = 120.0
    trajectory: str = "orbit"
    surface: str = "plane"
    depth_noise_sigma: float = 0.0  # relative
    affine_alpha_range: tuple = (1.0, 1.0)
    affine_beta_range: tuple = (0.0, 0.0)  # world units
    corr_noise_px: float = 0.0
    outlier_fraction: float = 0.0
    outlier_mode: str = "uniform_pixel"
    seed: int = 0
    corr_stride: int = 2  # correspondence grid spacing in pixels
    pair_window: int | None = None  # limit pairs to this frame-index distance

    def __post_init__(self):
        if self.frame_count < 2:
            raise ValueError("frame_count must be at least 2")
        if self.trajectory not in TRAJECTORIES:
            raise ValueError(f"trajectory must be one of {TRAJECTORIES}")
        if self.surface not in SURFACES:
            raise ValueError(f"surface must be one of {SURFACES}")
        if not (0 <= self.outlier_fraction < 1):
            raise ValueError("outlier_fraction must be in [0, 1)")
        if self.outlier_mode not in OUTLIER_MODES:
            raise ValueError(f"outlier_mode must be one of {OUTLIER_MODES}")


@dataclass
class SyntheticScene:
    config: SyntheticConfig
    true_states: dict  # frame_id -> FrameState with true pose/intrinsics/correction
    depth_maps: dict  # frame_id -> published (perturbed) depth
    true_depth_maps: dict  # frame_id -> exact rendered depth
    pointmaps: dict
    correspondences: dict  # (i, j) -> (n, 5)
    depth_scale: float  # median true depth over all frames
    scene_diameter: float  # max pairwise camera-center distance

    def inputs(self):
        from .solver import SceneInputs

        return SceneInputs(
            frame_sizes={fid: s.intrinsics.image_size for fid, s in self.true_states.items()},
            depth_maps=self.depth_maps,
            correspondences=self.correspondences,
            pointmaps=self.pointmaps,
            shared_intrinsics=True,
        )

    def write(self, out_dir):
        """Emit depth/pointmap/correspondence files plus the manifest."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        frames = []
        for fid in sorted(self.true_states):
            w, h = self.true_states[fid].intrinsics.image_size
            depth_path = f"depth_{fid:04d}.mbad"
            pm_path = f"pointmap_{fid:04d}.mbap"
            write_depth(out / depth_path, self.depth_maps[fid])
            write_pointmap(out / pm_path, self.pointmaps[fid])
            frames.append(ManifestFrame(frame_id=fid, width=w, height=h,
                                        depth_path=depth_path, pointmap_path=pm_path))
        pairs = []
        for (i, j) in sorted(self.correspondences):
            path = f"corr_{i:04d}_{j:04d}.mbac"
            write_correspondences(out / path, i, j, self.correspondences[(i, j)])
            pairs.append({"i": i, "j": j, "correspondence_path": path})
        save_manifest(SceneManifest(frames=frames, pairs=pairs, shared_intrinsics=True),
                      out / "manifest.json")


def _look_at(center):
    """World-to-camera pose for a camera at `center` looking at the origin,
    image x kept horizontal (world z is up)."""
    forward = -np.asarray(center, dtype=np.float64)
    forward = forward / np.linalg.norm(forward)
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(up, forward)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(np.array([0.0, 1.0, 0.0]), forward)
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward], axis=0)
    return CameraPose.from_rt(rot, -rot @ np.asarray(center, dtype=np.float64))


def _camera_centers(cfg: SyntheticConfig, rng):
    n = cfg.frame_count
    if cfg.trajectory == "orbit":
        angles = 2.0 * np.pi * np.arange(n) / n
        return np.column_stack([3.0 * np.cos(angles), 3.0 * np.sin(angles),
                                np.full(n, 3.0)])
    if cfg.trajectory == "line":
        xs = np.linspace(-2.0, 2.0, n)
        return np.column_stack([xs, np.full(n, -4.0), np.full(n, 3.0)])
    # random_inside_sphere: centers in a ball well above the surface
    pts = []
    while len(pts) < n:
        p = rng.uniform(-1.0, 1.0, size=3)
        if p @ p <= 1.0:
            pts.append(p)
    return np.array(pts) * 1.2 + np.array([0.0, 0.0, 3.5])


def _heightfield(x, y):
    return _HF_AMP * np.sin(_HF_FREQ * x) * np.cos(_HF_FREQ * y)


def _render_depth(cfg, pose, intrinsics):
    """Exact per-pixel depth of the analytic surface (NaN where a ray misses)."""
    w, h = intrinsics.image_size
    cx, cy = intrinsics.principal_point
    us, vs = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    rays = np.stack([(us - cx) / intrinsics.focal, (vs - cy) / intrinsics.focal,
                     np.ones_like(us)], axis=-1)
    rot = pose.rotation
    center = pose.camera_center()
    world_dir = rays @ rot  # R^T d per pixel
    wz = world_dir[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_plane = np.where(wz < -1e-12, -center[2] / wz, np.nan)
    if cfg.surface == "plane":
        return np.where(t_plane > Z_FLOOR, t_plane, np.nan)

    # bracket the crossing between the z = +AMP and z = -AMP planes, where
    # the signed height gap has opposite signs, then bisect
    with np.errstate(divide="ignore", invalid="ignore"):
        t_lo = np.where(wz < -1e-12, (_HF_AMP - center[2]) / wz, np.nan)
        t_hi = np.where(wz < -1e-12, (-_HF_AMP - center[2]) / wz, np.nan)

    def gap(t):
        p = center[None, None, :] + t[..., None] * world_dir
        return p[..., 2] - _heightfield(p[..., 0], p[..., 1])

    lo, hi = t_lo.copy(), t_hi.copy()
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        above = gap(mid) > 0
        lo = np.where(above, mid, lo)
        hi = np.where(above, hi, mid)
    depth = 0.5 * (lo + hi)
    return np.where(depth > Z_FLOOR, depth, np.nan)


def _surface_points(depth, pose, intrinsics):
    """World points of every valid depth pixel (NaN rows where invalid)."""
    w, h = intrinsics.image_size
    cx, cy = intrinsics.principal_point
    us, vs = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    pts_cam = np.stack([(us - cx) * depth / intrinsics.focal,
                        (vs - cy) * depth / intrinsics.focal, depth], axis=-1)
    rot = pose.rotation
    return (pts_cam - pose.translation) @ rot


def _project_points(points, pose, intrinsics):
    """World points -> (pixels, valid) in one camera."""
    rot, t = pose.rotation, pose.translation
    cam = points @ rot.T + t
    z = cam[..., 2]
    valid = np.isfinite(z) & (z > Z_FLOOR)
    with np.errstate(divide="ignore", invalid="ignore"):
        pix = intrinsics.focal * cam[..., :2] / z[..., None] + intrinsics.principal_point
    w, h = intrinsics.image_size
    inside = (pix[..., 0] >= 0) & (pix[..., 0] < w) & (pix[..., 1] >= 0) & (pix[..., 1] < h)
    return pix, valid & inside


def generate(cfg: SyntheticConfig, out_dir=None) -> SyntheticScene:
    """Build a deterministic ground-truth scene from the config.

    Published depth is the inverse affine of the rendered truth, so applying
    the drawn (alpha, beta) recovers it exactly. Correspondences cross-project
    grid pixels with the true geometry before noise and outlier injection.

    Raises:
        ConfigInfeasible: some camera sees the surface in < 80% of its pixels.
    """
    rng = np.random.default_rng(cfg.seed)
    centers = _camera_centers(cfg, rng)
    intrinsics = CameraIntrinsics.centered(cfg.focal_true, tuple(cfg.image_size))
    alphas = rng.uniform(*cfg.affine_alpha_range, size=cfg.frame_count)
    betas = rng.uniform(*cfg.affine_beta_range, size=cfg.frame_count)

    true_states, true_depths, pub_depths, pointmaps = {}, {}, {}, {}
    for fid in range(cfg.frame_count):
        pose = _look_at(centers[fid])
        depth = _render_depth(cfg, pose, intrinsics)
        visible = np.isfinite(depth)
        if np.mean(visible) < 0.8:
            raise ConfigInfeasible(
                f"camera {fid} sees the surface in only {np.mean(visible):.0%} of pixels"
            )
        noisy = depth
        if cfg.depth_noise_sigma > 0:
            noisy = depth * (1.0 + cfg.depth_noise_sigma * rng.standard_normal(depth.shape))
        published = (noisy - betas[fid]) / alphas[fid]
        w, h = intrinsics.image_size
        cx, cy = intrinsics.principal_point
        us, vs = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
        pointmaps[fid] = np.stack([
            (us - cx) * published / cfg.focal_true,
            (vs - cy) * published / cfg.focal_true,
            published,
        ], axis=-1)
        true_states[fid] = FrameState(
            frame_id=fid, intrinsics=intrinsics, pose=pose,
            correction=AffineDepthCorrection.from_alpha_beta(alphas[fid], betas[fid]),
        )
        true_depths[fid] = depth
        pub_depths[fid] = published

    w, h = intrinsics.image_size
    correspondences = {}
    grid_v, grid_u = np.meshgrid(np.arange(0, h, cfg.corr_stride),
                                 np.arange(0, w, cfg.corr_stride), indexing="ij")
    grid_v, grid_u = grid_v.ravel(), grid_u.ravel()
    for i in range(cfg.frame_count):
        depth_i = true_depths[i]
        sel = np.isfinite(depth_i[grid_v, grid_u])
        rows, cols = grid_v[sel], grid_u[sel]
        src_px = np.column_stack([cols + 0.5, rows + 0.5])
        points = _surface_points(depth_i, true_states[i].pose, intrinsics)[rows, cols]
        for j in range(cfg.frame_count):
            if j == i or not _pair_in_window(cfg, i, j):
                continue
            dst_px, ok = _project_points(points, true_states[j].pose, intrinsics)
            if np.count_nonzero(ok) < _MIN_PAIR_SAMPLES:
                continue
            src = src_px[ok]
            dst = dst_px[ok].copy()
            n = len(dst)
            if cfg.corr_noise_px > 0:
                dst = dst + cfg.corr_noise_px * rng.standard_normal(dst.shape)
            n_out = int(round(cfg.outlier_fraction * n))
            if n_out:
                picks = rng.choice(n, size=n_out, replace=False)
                if cfg.outlier_mode == "uniform_pixel":
                    dst[picks] = rng.uniform(0, 1, size=(n_out, 2)) * np.array([w, h])
                else:  # wrong_frame: consistent matches into another camera
                    others = [k for k in range(cfg.frame_count) if k not in (i, j)]
                    k = others[int(rng.integers(len(others)))] if others else j
                    wrong_px, _ = _project_points(points[ok][picks],
                                                  true_states[k].pose, intrinsics)
                    bad = ~np.all(np.isfinite(wrong_px), axis=1)
                    wrong_px[bad] = rng.uniform(0, 1, size=(int(bad.sum()), 2)) * np.array([w, h])
                    dst[picks] = np.clip(wrong_px, 0, [w - 1e-3, h - 1e-3])
            conf = rng.uniform(0.5, 1.0, size=n)
            dst[:, 0] = np.clip(dst[:, 0], 0, w - 1e-3)
            dst[:, 1] = np.clip(dst[:, 1], 0, h - 1e-3)
            correspondences[(i, j)] = np.column_stack([src, dst, conf])

    all_true = np.concatenate([d[np.isfinite(d)].ravel() for d in true_depths.values()])
    diffs = centers[:, None, :] - centers[None, :, :]
    scene = SyntheticScene(
        config=cfg,
        true_states=true_states,
        depth_maps=pub_depths,
        true_depth_maps=true_depths,
        pointmaps=pointmaps,
        correspondences=correspondences,
        depth_scale=float(np.median(all_true)),
        scene_diameter=float(np.sqrt((diffs**2).sum(axis=2).max())),
    )
    if out_dir is not None:
        scene.write(out_dir)
    return scene


def oracle_metrics(scene: SyntheticScene, states, frame_ids=None):
    """Score estimated states against the ground truth, gauge removed.

    A similarity aligning estimated camera centers to the true ones absorbs
    the global rotation/translation/scale freedom; alpha and beta are
    compared after multiplying by the aligned scale.

    Returns a dict with per-frame errors; `aligned` is False (and only raw
    counts are reported) when fewer than 3 frames are available.
    """
    if frame_ids is None:
        frame_ids = sorted(set(states) & set(scene.true_states))
    frame_ids = list(frame_ids)
    if len(frame_ids) < 3:
        return {"aligned": False, "frame_ids": frame_ids}
    est_centers = np.array([states[f].pose.camera_center() for f in frame_ids])
    gt_centers = np.array([scene.true_states[f].pose.camera_center() for f in frame_ids])
    scale, rot_a, t_a = umeyama(est_centers, gt_centers)
    rot_err, trans_err, alpha_err, beta_err = {}, {}, {}, {}
    for k, fid in enumerate(frame_ids):
        est, gt = states[fid], scene.true_states[fid]
        # world-frame alignment turns the estimated pose into R_est R_a^T
        rot_err[fid] = rotation_angle_deg(gt.pose.rotation, est.pose.rotation @ rot_a.T)
        aligned_center = scale * rot_a @ est_centers[k] + t_a
        trans_err[fid] = float(np.linalg.norm(aligned_center - gt_centers[k]))
        alpha_err[fid] = abs(scale * est.correction.alpha - gt.correction.alpha) / gt.correction.alpha
        beta_err[fid] = abs(scale * est.correction.beta - gt.correction.beta)
    return {
        "aligned": True,
        "frame_ids": frame_ids,
        "scale": scale,
        "rotation_errors_deg": rot_err,
        "translation_errors": trans_err,
        "alpha_relative_errors": alpha_err,
        "beta_abs_errors": beta_err,
    }
